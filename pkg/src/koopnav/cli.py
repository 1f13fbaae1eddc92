"""``koopnav`` command line: train, predict, navigate, benchmark."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, PositiveFloat, PositiveInt, ValidationError, field_validator, model_validator

from . import __version__
from . import dynamics as dyn
from . import koopman as kp
from . import navigator as nav
from .nmpc import NominalPredictor, SolverConfig

log = logging.getLogger("koopnav")

EXIT_OK, EXIT_ERROR, EXIT_COLLIDED, EXIT_TIMEOUT = 0, 1, 2, 3
OUTCOME_EXIT = {nav.Outcome.REACHED: EXIT_OK, nav.Outcome.COLLIDED: EXIT_COLLIDED, nav.Outcome.TIMEOUT: EXIT_TIMEOUT}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


def _check_box(box, n):
    if len(box) != n:
        raise ValueError(f"expected {n} numbers")
    for lo, hi in zip(box[::2], box[1::2]):
        if not lo < hi:
            raise ValueError(f"box needs lo < hi, got {list(box)}")
    return box


class TrainConfig(_Strict):
    n_traj: PositiveInt = 200
    n_steps: PositiveInt = 200
    ts: PositiveFloat = 0.1
    lam: NonNegativeFloat = Field(0.0, alias="lambda")
    resample_mode: dyn.ResampleMode = dyn.ResampleMode.PER_STEP
    control_box: tuple[float, float, float, float] = (-1.0, 1.0, -1.0, 1.0)
    x0_box: tuple[float, float] = (-1.0, 1.0)
    seed: int = 0
    holdout_traj: PositiveInt = 50
    holdout_steps: PositiveInt = 200
    pinv_tol: NonNegativeFloat = 1e-12

    @field_validator("control_box")
    @classmethod
    def _cb(cls, v):
        return _check_box(v, 4)

    @field_validator("x0_box")
    @classmethod
    def _xb(cls, v):
        return _check_box(v, 2)


_SOLVER = SolverConfig()


class SolverSettings(_Strict):
    tol_opt: PositiveFloat = _SOLVER.tol_opt
    tol_feas: PositiveFloat = _SOLVER.tol_feas
    max_outer: PositiveInt = _SOLVER.max_outer
    max_inner: PositiveInt = _SOLVER.max_inner
    penalty_init: PositiveFloat = _SOLVER.penalty_init
    penalty_growth: float = Field(_SOLVER.penalty_growth, gt=1.0)
    penalty_max: PositiveFloat = _SOLVER.penalty_max
    warm_penalty_cap: PositiveFloat = _SOLVER.warm_penalty_cap
    stall_outer: PositiveInt = _SOLVER.stall_outer

    def build(self) -> SolverConfig:
        return SolverConfig(**self.model_dump())


class ControllerConfig(_Strict):
    horizon: PositiveInt = 20
    Q: tuple[NonNegativeFloat, NonNegativeFloat, NonNegativeFloat] = (1.0, 5.0, 0.1)
    R: tuple[NonNegativeFloat, NonNegativeFloat] = (0.5, 0.05)
    obstacle_backoff: NonNegativeFloat = nav.DEFAULT_BACKOFF
    solver: SolverSettings = SolverSettings()


class PredictConfig(_Strict):
    x0: tuple[float, float, float] = (0.0, 0.0, 0.0)
    steps: PositiveInt = 200
    seed: int = 0
    lam: NonNegativeFloat = Field(0.0, alias="lambda")
    resample_mode: dyn.ResampleMode = dyn.ResampleMode.PER_STEP
    control_box: tuple[float, float, float, float] = (-1.0, 1.0, -1.0, 1.0)
    trajectory: Optional[str] = None

    @field_validator("control_box")
    @classmethod
    def _cb(cls, v):
        return _check_box(v, 4)


class NavigateConfig(_Strict):
    scenario: Optional[str] = None
    model: Optional[str] = None
    method: Literal["koopman", "nominal"] = "koopman"
    lam: NonNegativeFloat = Field(0.0, alias="lambda")
    seed: int = 0
    ts: PositiveFloat = 0.1
    resample_mode: dyn.ResampleMode = dyn.ResampleMode.PER_STEP
    controller: ControllerConfig = ControllerConfig()

    @model_validator(mode="after")
    def _needs_model(self):
        if self.method == "koopman" and self.model is None:
            raise ValueError("method 'koopman' needs a model file (config 'model' or --model)")
        return self


class GeneralizationCell(_Strict):
    train_lambda: NonNegativeFloat
    deploy_lambdas: list[NonNegativeFloat] = Field(min_length=1)


class BenchmarkConfig(_Strict):
    scenario: Optional[str] = None
    lambdas: list[NonNegativeFloat] = Field(min_length=1)
    methods: list[Literal["nmpc", "k-nmpc"]] = Field(default_factory=lambda: ["nmpc", "k-nmpc"], min_length=1)
    generalization: list[GeneralizationCell] = Field(default_factory=list)
    trials: PositiveInt = 5
    base_seed: int = 0
    ts: PositiveFloat = 0.1
    resample_mode: dyn.ResampleMode = dyn.ResampleMode.PER_STEP
    models: dict[str, str] = Field(default_factory=dict)
    auto_train: bool = True
    training: TrainConfig = TrainConfig()
    controller: ControllerConfig = ControllerConfig()

    @field_validator("models")
    @classmethod
    def _keys_are_lambdas(cls, v):
        for k in v:
            try:
                float(k)
            except ValueError:
                raise ValueError(f"model keys must be lambda values, got {k!r}") from None
        return v

    def conditions(self) -> list[nav.Condition]:
        out = []
        for lam in self.lambdas:
            for m in self.methods:
                out.append(nav.Condition(m, lam))
        for cell in self.generalization:
            for lam in cell.deploy_lambdas:
                out.append(nav.Condition("k-nmpc", lam, cell.train_lambda))
        return out


# -- config loading -----------------------------------------------------------


def load_config(cls, path, overrides: dict):
    data = {}
    if path is not None:
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return cls.model_validate(data)


def load_scenario(path) -> nav.Scenario:
    return nav.default_scenario() if path is None else nav.Scenario.load(path)


# -- commands -----------------------------------------------------------------


def train_model(cfg: TrainConfig) -> tuple[kp.KoopmanModel, float]:
    """Fit on random-control data and score on an independent held-out set."""
    train_ss, hold_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    plant = dyn.PerturbationSpec(cfg.lam, cfg.resample_mode)
    trajs = dyn.random_training_set(cfg.n_traj, cfg.n_steps, cfg.ts, plant, np.random.default_rng(train_ss), cfg.control_box, cfg.x0_box)
    meta = {
        "n_traj": cfg.n_traj,
        "n_steps": cfg.n_steps,
        "lambda": cfg.lam,
        "resample_mode": cfg.resample_mode.value,
        "seed": cfg.seed,
        "control_box": list(cfg.control_box),
        "x0_box": list(cfg.x0_box),
    }
    model = kp.fit_trajectories(trajs, tol=cfg.pinv_tol, meta=meta)
    held = dyn.random_training_set(cfg.holdout_traj, cfg.holdout_steps, cfg.ts, plant, np.random.default_rng(hold_ss), cfg.control_box, cfg.x0_box)
    rmse = kp.holdout_rmse(model, held)
    model.training_meta["holdout_rmse_percent"] = rmse
    model.training_meta["holdout"] = {"n_traj": cfg.holdout_traj, "n_steps": cfg.holdout_steps}
    return model, rmse


def cmd_train(args) -> int:
    cfg = load_config(TrainConfig, args.config, {"seed": args.seed, "lambda": args.lam})
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        raise OSError(f"output directory {out.parent} does not exist")
    model, rmse = train_model(cfg)
    model.save(out)
    print(f"trained on {cfg.n_traj}x{cfg.n_steps} (lambda={cfg.lam:g}); held-out RMSE {rmse:.3f}% -> {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = load_config(PredictConfig, args.config, {"seed": args.seed, "lambda": args.lam})
    model = kp.KoopmanModel.load(args.model)
    if cfg.trajectory is not None:
        truth = dyn.Trajectory.from_csv(cfg.trajectory)
    else:
        rng = np.random.default_rng(cfg.seed)
        vlo, vhi, wlo, whi = cfg.control_box
        U = rng.uniform([vlo, wlo], [vhi, whi], size=(cfg.steps, 2))
        truth = dyn.simulate(cfg.x0, U, model.ts, dyn.PerturbationSpec(cfg.lam, cfg.resample_mode), rng)
    pred = kp.predict_trajectory(model, truth.states[0], truth.controls)
    rmse = kp.rmse_percent(truth, pred)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "psi", "x_pred", "y_pred", "psi_pred", "v", "omega"])
        for k, t in enumerate(truth.times):
            u = truth.controls[k] if k < len(truth.controls) else ("", "")
            w.writerow([repr(float(t)), *map(repr, map(float, truth.states[k])), *map(repr, map(float, pred.states[k])), *(repr(float(c)) if c != "" else "" for c in u)])
    print(f"open-loop RMSE {rmse:.3f}% over {len(truth.controls)} steps -> {args.out}")
    return EXIT_OK


def cmd_navigate(args) -> int:
    cfg = load_config(
        NavigateConfig,
        args.config,
        {"seed": args.seed, "lambda": args.lam, "method": args.method, "model": args.model, "scenario": args.scenario},
    )
    scenario = load_scenario(cfg.scenario)
    if cfg.method == "koopman":
        predictor = kp.KoopmanModel.load(cfg.model)
    else:
        predictor = NominalPredictor(cfg.ts)
    c = cfg.controller
    spec = nav.ocp_for(scenario, predictor, c.horizon, np.array(c.Q), np.array(c.R), c.obstacle_backoff)
    plant = dyn.PerturbationSpec(cfg.lam, cfg.resample_mode)
    result = nav.run_trial(scenario, spec, plant, cfg.seed, c.solver.build())
    if args.out:
        result.trajectory.to_csv(args.out)
    fx, fy, fp = result.trajectory.states[-1]
    label = "k-nmpc" if cfg.method == "koopman" else "nmpc"
    print(
        f"{result.outcome.value} method={label} lambda={cfg.lam:g} seed={cfg.seed} duration={result.duration:.2f}s "
        f"unconverged_steps={result.unconverged_steps} final=({fx:.3f},{fy:.3f},{fp:.3f})"
    )
    return OUTCOME_EXIT[result.outcome]


def _benchmark_models(cfg: BenchmarkConfig, out_dir: Path) -> dict[float, object]:
    models: dict[float, object] = {float(k): v for k, v in cfg.models.items()}
    needed = sorted({c.train_lam for c in cfg.conditions() if c.method == "k-nmpc"})
    for lam in needed:
        if lam in models and Path(models[lam]).exists():
            continue
        if not cfg.auto_train:
            continue  # run_benchmark names the condition that lacks a model
        path = out_dir / "models" / f"model_lambda{lam:g}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        tcfg = cfg.training.model_copy(update={"lam": lam, "ts": cfg.ts, "resample_mode": cfg.resample_mode})
        model, rmse = train_model(tcfg)
        model.save(path)
        log.info("trained model for lambda=%g (held-out RMSE %.2f%%) -> %s", lam, rmse, path)
        models[lam] = path
    return models


def cmd_benchmark(args) -> int:
    cfg = load_config(BenchmarkConfig, args.config, {"base_seed": args.seed})
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    failed = out_dir / "FAILED"
    if failed.exists():
        failed.unlink()
    with open(out_dir / "benchmark.json", "w") as fh:
        json.dump({"koopnav_version": __version__, "config": cfg.model_dump(mode="json", by_alias=True)}, fh, indent=2)
        fh.write("\n")
    c = cfg.controller
    spec = nav.BenchmarkSpec(
        scenario=load_scenario(cfg.scenario),
        conditions=cfg.conditions(),
        trials=cfg.trials,
        base_seed=cfg.base_seed,
        ts=cfg.ts,
        horizon=c.horizon,
        solver=c.solver.build(),
        resample_mode=cfg.resample_mode,
        obstacle_backoff=c.obstacle_backoff,
        Q=tuple(c.Q),
        R=tuple(c.R),
    )
    try:
        models = _benchmark_models(cfg, out_dir)
        stats = nav.run_benchmark(spec, models, jobs=args.jobs, out_dir=out_dir)
    except Exception as exc:
        failed.write_text(f"{exc}\n")
        raise
    print(stats.format())
    print(f"stats -> {out_dir / 'stats.csv'}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="koopnav", description=__doc__)
    p.add_argument("--version", action="version", version=f"koopnav {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", required=True, help=out_help)

    t = sub.add_parser("train", help="fit a bilinear model on random-control data")
    common(t, "model JSON to write")
    t.add_argument("--lambda", dest="lam", type=float, help="perturbation rate of the training plant")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="open-loop model rollout against the plant, to CSV")
    common(r, "CSV to write")
    r.add_argument("--model", required=True, help="model JSON")
    r.add_argument("--lambda", dest="lam", type=float, help="perturbation rate of the reference plant")
    r.set_defaults(func=cmd_predict)

    n = sub.add_parser("navigate", help="one closed-loop trial")
    n.add_argument("--config", help="JSON config file")
    n.add_argument("--seed", type=int)
    n.add_argument("--out", help="trajectory CSV to write")
    n.add_argument("--lambda", dest="lam", type=float, help="plant perturbation rate")
    n.add_argument("--method", choices=["koopman", "nominal"])
    n.add_argument("--model", help="model JSON (koopman method)")
    n.add_argument("--scenario", help="scenario JSON (default: built-in)")
    n.set_defaults(func=cmd_navigate)

    b = sub.add_parser("benchmark", help="seeded trials per (method, lambda) condition")
    common(b, "output directory")
    b.add_argument("--jobs", type=int, default=1, help="worker processes")
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_ERROR
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: invalid configuration\n{exc}", file=sys.stderr)
    except (OSError, ValueError, LookupError, nav.BenchmarkError, dyn.NonFiniteStateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
