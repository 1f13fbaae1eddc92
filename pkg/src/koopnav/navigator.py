"""Closed-loop navigation trials and the benchmark harness.

Each control period the NMPC is solved from the measured pose, the first
control is applied to the perturbed plant for one RK4 step, and the new pose
is checked for collision and then for goal arrival.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import dynamics as dyn
from .koopman import KoopmanModel
from .nmpc import (
    DEFAULT_CONTROL_BOX,
    DEFAULT_Q,
    DEFAULT_R,
    DEFAULT_STATE_BOX,
    NominalPredictor,
    Obstacle,
    OcpSolution,
    OcpSpec,
    SolverConfig,
    solve_ocp,
    warm_start_shift,
)

log = logging.getLogger(__name__)

SCENARIO_KEYS = {
    "start", "goal", "robot_radius", "goal_pos_tol", "max_sim_time",
    "state_box", "control_box", "obstacles",
}
# clearance added to every inflated obstacle in the controller (not in the collision check)
DEFAULT_BACKOFF = 5e-3
STATS_HEADER = ["method", "lambda", "trials", "collisions", "avg_success_s", "avg_failure_s"]
TRIALS_HEADER = ["method", "lambda", "train_lambda", "trial", "seed", "outcome", "duration_s", "unconverged_steps", "final_x", "final_y", "final_psi"]


class ScenarioError(ValueError):
    pass


class MissingModelError(LookupError):
    pass


class Outcome(str, Enum):
    REACHED = "reached"
    COLLIDED = "collided"
    TIMEOUT = "timeout"


@dataclass
class Scenario:
    obstacles: Sequence[Obstacle]
    start: np.ndarray
    goal: np.ndarray
    robot_radius: float = 0.15
    goal_pos_tol: float = 0.05
    max_sim_time: float = 30.0
    state_box: Sequence[float] = DEFAULT_STATE_BOX
    control_box: Sequence[float] = DEFAULT_CONTROL_BOX

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        self.obstacles = tuple(self.obstacles)
        self.state_box = tuple(float(v) for v in self.state_box)
        self.control_box = tuple(float(v) for v in self.control_box)
        if self.start.shape != (3,) or self.goal.shape != (3,):
            raise ScenarioError("start and goal must be [x, y, psi]")
        if not (self.robot_radius > 0 and self.goal_pos_tol > 0 and self.max_sim_time > 0):
            raise ScenarioError("robot_radius, goal_pos_tol and max_sim_time must be positive")
        if len(self.state_box) != 4 or len(self.control_box) != 4:
            raise ScenarioError("state_box and control_box need four numbers")
        xmin, xmax, ymin, ymax = self.state_box
        for name, p in (("start", self.start), ("goal", self.goal)):
            if not (xmin <= p[0] <= xmax and ymin <= p[1] <= ymax):
                raise ScenarioError(f"{name} {p[:2].tolist()} lies outside the state box")
        for o in self.obstacles:
            if math.hypot(self.goal[0] - o.cx, self.goal[1] - o.cy) <= o.radius + self.robot_radius:
                raise ScenarioError(f"goal lies inside inflated obstacle {o}")

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if not isinstance(d, dict):
            raise ScenarioError("scenario must be a JSON object")
        unknown = set(d) - SCENARIO_KEYS
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        missing = {"start", "goal", "obstacles"} - set(d)
        if missing:
            raise ScenarioError(f"missing scenario keys: {sorted(missing)}")
        try:
            obstacles = []
            for o in d["obstacles"]:
                extra = set(o) - {"cx", "cy", "radius"}
                if extra:
                    raise ScenarioError(f"unknown obstacle keys: {sorted(extra)}")
                obstacles.append(Obstacle(float(o["cx"]), float(o["cy"]), float(o["radius"])))
            kwargs = {k: d[k] for k in SCENARIO_KEYS - {"obstacles"} if k in d}
            return cls(obstacles=obstacles, **kwargs)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(f"malformed scenario: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "start": self.start.tolist(),
            "goal": self.goal.tolist(),
            "robot_radius": self.robot_radius,
            "goal_pos_tol": self.goal_pos_tol,
            "max_sim_time": self.max_sim_time,
            "state_box": list(self.state_box),
            "control_box": list(self.control_box),
            "obstacles": [{"cx": o.cx, "cy": o.cy, "radius": o.radius} for o in self.obstacles],
        }

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ScenarioError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def default_scenario() -> Scenario:
    text = resources.files("koopnav").joinpath("data/default_scenario.json").read_text()
    return Scenario.from_dict(json.loads(text))


def ocp_for(scenario: Scenario, predictor, horizon: int = 20, Q=DEFAULT_Q, R=DEFAULT_R, obstacle_backoff: float = DEFAULT_BACKOFF) -> OcpSpec:
    return OcpSpec(
        predictor=predictor,
        x_ref=scenario.goal,
        horizon=horizon,
        Q=Q,
        R=R,
        control_box=scenario.control_box,
        state_box=scenario.state_box,
        obstacles=scenario.obstacles,
        robot_radius=scenario.robot_radius,
        obstacle_backoff=obstacle_backoff,
    )


def check_collision(s, scenario: Scenario) -> bool:
    """True iff the planar position is strictly inside some inflated obstacle."""
    r = scenario.robot_radius
    return any(math.hypot(s[0] - o.cx, s[1] - o.cy) < r + o.radius for o in scenario.obstacles)


def goal_reached(s, scenario: Scenario) -> bool:
    return math.hypot(s[0] - scenario.goal[0], s[1] - scenario.goal[1]) <= scenario.goal_pos_tol


@dataclass
class TrialResult:
    outcome: Outcome
    duration: float
    unconverged_steps: int
    trajectory: dyn.Trajectory
    seed: int
    solve_times: list = field(default_factory=list, repr=False)


def run_trial(
    scenario: Scenario,
    controller: OcpSpec,
    plant: dyn.PerturbationSpec,
    seed: int,
    cfg: SolverConfig = SolverConfig(),
    record_times: bool = False,
) -> TrialResult:
    """One closed-loop episode; the recorded path comes only from the plant."""
    ts = controller.predictor.ts
    rng = np.random.default_rng(seed)
    x = scenario.start.copy()
    states = [x]
    controls: list[np.ndarray] = []
    vlo, vhi, wlo, whi = scenario.control_box
    lo, hi = np.array([vlo, wlo]), np.array([vhi, whi])
    p_fixed = dyn.sample_perturbation(plant, rng) if plant.resample_mode is dyn.ResampleMode.PER_TRAJECTORY else None

    def finish(outcome):
        traj = dyn.Trajectory(ts, np.array(states), np.array(controls).reshape(-1, 2))
        return TrialResult(outcome, len(controls) * ts, unconverged, traj, seed, times)

    unconverged = 0
    times: list[float] = []
    if goal_reached(x, scenario):
        return finish(Outcome.REACHED)
    max_steps = int(round(scenario.max_sim_time / ts))
    prev: OcpSolution | None = None
    for _ in range(max_steps):
        t0 = time.perf_counter() if record_times else 0.0
        init = None if prev is None else warm_start_shift(prev, controller.predictor, x)
        sol = solve_ocp(x, controller, init, cfg)
        if not sol.converged and init is not None:
            cold = solve_ocp(x, controller, None, cfg)
            if cold.converged or cold.max_violation < sol.max_violation:
                sol = cold
        if record_times:
            times.append(time.perf_counter() - t0)
        if not sol.converged:
            unconverged += 1
        prev = sol
        u = np.clip(sol.U[0], lo, hi)
        p = p_fixed if p_fixed is not None else dyn.sample_perturbation(plant, rng)
        x = dyn.rk4_step(x, u, p, ts)
        if not np.all(np.isfinite(x)):
            raise dyn.NonFiniteStateError(len(controls))
        states.append(x)
        controls.append(u)
        if check_collision(x, scenario):
            return finish(Outcome.COLLIDED)
        if goal_reached(x, scenario):
            return finish(Outcome.REACHED)
    return finish(Outcome.TIMEOUT)


def replay(result: TrialResult, scenario: Scenario, plant: dyn.PerturbationSpec) -> np.ndarray:
    """Re-integrate the recorded controls through the plant with the recorded seed."""
    traj = result.trajectory
    if len(traj.controls) == 0:
        return traj.states.copy()
    return dyn.simulate(scenario.start, traj.controls, traj.ts, plant, np.random.default_rng(result.seed)).states


# -- benchmark ----------------------------------------------------------------


@dataclass(frozen=True)
class Condition:
    method: str  # "nmpc" (nominal model) or "k-nmpc" (learned model)
    lam: float
    train_lam: float | None = None

    def __post_init__(self):
        if self.method not in ("nmpc", "k-nmpc"):
            raise ValueError(f"method must be 'nmpc' or 'k-nmpc', got {self.method!r}")
        if self.method == "k-nmpc" and self.train_lam is None:
            object.__setattr__(self, "train_lam", self.lam)
        if self.method == "nmpc":
            object.__setattr__(self, "train_lam", None)

    @property
    def label(self) -> str:
        if self.method == "k-nmpc" and self.train_lam != self.lam:
            return f"k-nmpc(train={self.train_lam:g})"
        return self.method


@dataclass
class BenchmarkSpec:
    scenario: Scenario
    conditions: Sequence[Condition]
    trials: int = 5
    base_seed: int = 0
    ts: float = 0.1
    horizon: int = 20
    solver: SolverConfig = SolverConfig()
    resample_mode: dyn.ResampleMode = dyn.ResampleMode.PER_STEP
    obstacle_backoff: float = DEFAULT_BACKOFF
    Q: Sequence[float] = tuple(DEFAULT_Q)
    R: Sequence[float] = tuple(DEFAULT_R)


@dataclass
class ConditionStats:
    condition: Condition
    results: list[TrialResult]

    @property
    def collisions(self) -> int:
        return sum(r.outcome is Outcome.COLLIDED for r in self.results)

    @property
    def reached(self) -> int:
        return sum(r.outcome is Outcome.REACHED for r in self.results)

    @property
    def timeouts(self) -> int:
        return sum(r.outcome is Outcome.TIMEOUT for r in self.results)

    def _mean(self, outcome):
        d = [r.duration for r in self.results if r.outcome is outcome]
        return float(np.mean(d)) if d else None

    @property
    def avg_success(self):
        return self._mean(Outcome.REACHED)

    @property
    def avg_failure(self):
        return self._mean(Outcome.COLLIDED)


@dataclass
class BenchmarkStats:
    rows: list[ConditionStats]

    def table(self) -> list[dict]:
        out = []
        for row in self.rows:
            out.append({
                "method": row.condition.label,
                "lambda": row.condition.lam,
                "trials": len(row.results),
                "collisions": row.collisions,
                "avg_success_s": row.avg_success,
                "avg_failure_s": row.avg_failure,
            })
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(STATS_HEADER)
            for r in self.table():
                w.writerow([
                    r["method"], repr(r["lambda"]), r["trials"], r["collisions"],
                    "" if r["avg_success_s"] is None else f"{r['avg_success_s']:.2f}",
                    "" if r["avg_failure_s"] is None else f"{r['avg_failure_s']:.2f}",
                ])

    def write_trials(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRIALS_HEADER)
            for row in self.rows:
                c = row.condition
                for i, r in enumerate(row.results):
                    fx, fy, fp = r.trajectory.states[-1]
                    w.writerow([
                        c.method, repr(c.lam), "" if c.train_lam is None else repr(c.train_lam),
                        i, r.seed, r.outcome.value, f"{r.duration:.2f}", r.unconverged_steps,
                        repr(float(fx)), repr(float(fy)), repr(float(fp)),
                    ])

    def format(self) -> str:
        lines = [f"{'method':<20}{'lambda':>8}{'collisions':>12}{'avg ok [s]':>12}{'avg fail [s]':>14}"]
        for r in self.table():
            ok = "/" if r["avg_success_s"] is None else f"{r['avg_success_s']:.2f}"
            bad = "/" if r["avg_failure_s"] is None else f"{r['avg_failure_s']:.2f}"
            lines.append(f"{r['method']:<20}{r['lambda']:>8g}{r['collisions']:>8}/{r['trials']:<3}{ok:>12}{bad:>14}")
        return "\n".join(lines)


def _resolve_model(models: Mapping[float, object], cond: Condition) -> KoopmanModel:
    key = cond.train_lam
    entry = None
    for k, v in models.items():
        if float(k) == key:
            entry = v
            break
    if entry is None:
        raise MissingModelError(f"no trained model for condition {cond.label} (lambda={cond.lam:g}, train lambda={key:g})")
    if isinstance(entry, KoopmanModel):
        return entry
    path = Path(entry)
    if not path.exists():
        raise MissingModelError(f"model file {path} for condition {cond.label} (train lambda={key:g}) does not exist")
    return KoopmanModel.load(path)


def _run_one(args):
    spec, cond, model, trial = args
    predictor = NominalPredictor(spec.ts) if cond.method == "nmpc" else model
    controller = ocp_for(spec.scenario, predictor, spec.horizon, np.asarray(spec.Q, dtype=float), np.asarray(spec.R, dtype=float), spec.obstacle_backoff)
    plant = dyn.PerturbationSpec(cond.lam, spec.resample_mode)
    seed = spec.base_seed + trial
    return run_trial(spec.scenario, controller, plant, seed, spec.solver)


class BenchmarkError(RuntimeError):
    """A benchmark stopped early; ``partial`` holds the conditions that finished."""

    def __init__(self, message: str, partial: "BenchmarkStats"):
        super().__init__(message)
        self.partial = partial


def run_benchmark(spec: BenchmarkSpec, models: Mapping[float, object] | None = None, jobs: int = 1, out_dir=None) -> BenchmarkStats:
    """Run ``spec.trials`` seeded trials per condition (seed = base_seed + trial index).

    Trials fan out over up to ``jobs`` worker processes. Results are collected
    in condition order; with ``out_dir`` the outputs are rewritten after every
    finished condition, so a failure leaves the completed part on disk.
    """
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    models = models or {}
    resolved = {}
    for cond in spec.conditions:
        if cond.method == "k-nmpc":
            model = _resolve_model(models, cond)
            if abs(model.ts - spec.ts) > 1e-12:
                raise ValueError(f"model for {cond.label} has ts={model.ts}, benchmark runs at ts={spec.ts}")
            resolved[cond] = model
    tasks = [[(spec, cond, resolved.get(cond), t) for t in range(spec.trials)] for cond in spec.conditions]
    stats = BenchmarkStats([])
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        futures = [[pool.submit(_run_one, t) for t in group] for group in tasks] if pool else None
        for i, cond in enumerate(spec.conditions):
            try:
                if pool:
                    results = [f.result() for f in futures[i]]
                else:
                    results = [_run_one(t) for t in tasks[i]]
            except Exception as exc:
                raise BenchmarkError(f"condition {cond.label} lambda={cond.lam:g} failed: {exc}", stats) from exc
            stats.rows.append(ConditionStats(cond, results))
            log.info("%s lambda=%g: %d/%d collisions", cond.label, cond.lam, stats.rows[-1].collisions, spec.trials)
            if out_dir is not None:
                write_outputs(stats, out_dir)
    finally:
        if pool:
            pool.shutdown(cancel_futures=True)
    return stats


def trial_csv_name(cond: Condition, trial: int) -> str:
    tag = cond.method if cond.train_lam in (None, cond.lam) else f"{cond.method}-train{cond.train_lam:g}"
    return f"{tag}_lambda{cond.lam:g}_trial{trial}.csv"


def write_outputs(stats: BenchmarkStats, out_dir) -> None:
    out = Path(out_dir)
    (out / "trials").mkdir(parents=True, exist_ok=True)
    stats.write_csv(out / "stats.csv")
    stats.write_trials(out / "trials.csv")
    for row in stats.rows:
        for i, r in enumerate(row.results):
            r.trajectory.to_csv(out / "trials" / trial_csv_name(row.condition, i))
