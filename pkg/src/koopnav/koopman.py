"""Bilinear EDMDc: snapshot assembly, Kronecker least squares, prediction.

The lifted model is ``z+ = A z + B u + H (u ⊗ z)`` with readout ``x = C z``.
``A, B, H`` come from one pseudoinverse solve against the stacked regressor
``[Z; U; U⊗Z]``, and ``C`` from ``X Z^+``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import lifting
from .dynamics import N_CONTROL, N_STATE, NonFiniteStateError, Trajectory
from .lin_core import DEFAULT_RCOND, kron_cols, kron_vec, lstsq_min_norm

FORMAT = "koopman-bilinear-v1"


class ModelFormatError(ValueError):
    pass


@dataclass
class SnapshotData:
    X: np.ndarray
    Z: np.ndarray
    Zp: np.ndarray
    U: np.ndarray
    UkronZ: np.ndarray

    @property
    def T(self) -> int:
        return self.X.shape[1]


@dataclass
class KoopmanModel:
    A: np.ndarray
    B: np.ndarray
    H: np.ndarray
    C: np.ndarray
    ts: float
    dictionary_id: str = lifting.DICTIONARY_ID
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        N = lifting.N_OBS
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        self.H = np.asarray(self.H, dtype=float)
        self.C = np.asarray(self.C, dtype=float)
        expected = {
            "A": (N, N),
            "B": (N, N_CONTROL),
            "H": (N, N_CONTROL * N),
            "C": (N_STATE, N),
        }
        for name, shape in expected.items():
            mat = getattr(self, name)
            if mat.shape != shape:
                raise ModelFormatError(f"{name} has shape {mat.shape}, expected {shape}")
            if not np.all(np.isfinite(mat)):
                raise ModelFormatError(f"{name} has non-finite entries")
        if not self.ts > 0:
            raise ModelFormatError("ts must be positive")
        if self.dictionary_id != lifting.DICTIONARY_ID:
            raise ModelFormatError(f"unknown dictionary {self.dictionary_id!r}")

    @property
    def H_blocks(self) -> np.ndarray:
        """``H`` split per input channel: ``(m, N, N)`` with ``H = [H_0, H_1]``."""
        N = lifting.N_OBS
        return self.H.reshape(N, N_CONTROL, N).transpose(1, 0, 2)

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "dictionary_id": self.dictionary_id,
            "observables": list(lifting.OBSERVABLE_NAMES),
            "ts": self.ts,
            "n": N_STATE,
            "m": N_CONTROL,
            "n_obs": lifting.N_OBS,
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "H": self.H.tolist(),
            "C": self.C.tolist(),
            "training_meta": self.training_meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KoopmanModel":
        if not isinstance(d, dict):
            raise ModelFormatError("model file must hold a JSON object")
        if d.get("format") != FORMAT:
            raise ModelFormatError(f"format must be {FORMAT!r}, got {d.get('format')!r}")
        missing = {"dictionary_id", "ts", "n", "m", "n_obs", "A", "B", "H", "C"} - d.keys()
        if missing:
            raise ModelFormatError(f"model file missing fields: {sorted(missing)}")
        if (d["n"], d["m"], d["n_obs"]) != (N_STATE, N_CONTROL, lifting.N_OBS):
            raise ModelFormatError(
                f"dimension fields (n, m, n_obs) = {(d['n'], d['m'], d['n_obs'])} unsupported"
            )
        try:
            mats = {k: np.array(d[k], dtype=float) for k in "ABHC"}
        except (TypeError, ValueError) as exc:
            raise ModelFormatError(f"bad matrix entry: {exc}") from exc
        return cls(
            ts=float(d["ts"]),
            dictionary_id=d["dictionary_id"],
            training_meta=dict(d.get("training_meta") or {}),
            **mats,
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "KoopmanModel":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ModelFormatError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)

    # -- prediction ----------------------------------------------------------

    def lifted_step(self, z, u) -> np.ndarray:
        """``A z + B u + H (u ⊗ z)``, batched over leading axes."""
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        uz = (u[..., :, None] * z[..., None, :]).reshape(z.shape[:-1] + (-1,))
        return z @ self.A.T + u @ self.B.T + uz @ self.H.T

    def step(self, s, u) -> np.ndarray:
        return lifting.project(self.C, self.lifted_step(lifting.lift(s), u))

    def step_jac(self, s, u):
        """Batched one-step prediction with Jacobians ``df/ds`` (…,3,3) and ``df/du`` (…,3,2)."""
        s = np.asarray(s, dtype=float)
        u = np.asarray(u, dtype=float)
        z = lifting.lift(s)
        Hb = self.H_blocks
        # dz+/dz = A + sum_i u_i H_i ; dz+/du_i = B[:, i] + H_i z
        Mz = self.A + np.einsum("...i,ijk->...jk", u, Hb)
        Hz = np.einsum("ijk,...k->...ji", Hb, z)
        zp = z @ self.A.T + u @ self.B.T + np.einsum("...jk,...k->...j", Mz - self.A, z)
        CM = np.einsum("aj,...jk->...ak", self.C, Mz)
        dS = CM @ lifting.lift_jac(s)
        dU = np.einsum("aj,...ji->...ai", self.C, self.B + Hz)
        return zp @ self.C.T, dS, dU

    def step_hess(self, s, u, y) -> np.ndarray:
        """Hessian of ``y · f(s, u)`` w.r.t. ``(s, u)``, shape ``(..., 5, 5)``.

        The model is bilinear in ``(z, u)`` and ``z`` is linear in ``s`` except
        for the ``cos/sin`` observables, so only psi-psi and psi-u terms survive.
        """
        s = np.asarray(s, dtype=float)
        u = np.asarray(u, dtype=float)
        G = np.asarray(y, dtype=float) @ self.C  # (..., N)
        Hb = self.H_blocks
        psi = s[..., 2]
        d2z = np.zeros(psi.shape + (lifting.N_OBS,))
        d2z[..., 4] = -np.cos(psi)
        d2z[..., 5] = -np.sin(psi)
        Mz = self.A + np.einsum("...i,ijk->...jk", u, Hb)
        out = np.zeros(psi.shape + (5, 5))
        out[..., 2, 2] = np.einsum("...j,...jk,...k->...", G, Mz, d2z)
        GH = np.einsum("...j,ijk->...ik", G, Hb)  # (..., m, N)
        cross = GH @ lifting.lift_jac(s)  # (..., m, 3)
        out[..., 3:, :3] = cross
        out[..., :3, 3:] = np.swapaxes(cross, -1, -2)
        return out


def assemble(trajs: Sequence[Trajectory]) -> SnapshotData:
    """Stack snapshot pairs from every trajectory; pairs never span two trajectories."""
    trajs = list(trajs)
    if not trajs:
        raise ValueError("need at least one trajectory")
    ts = trajs[0].ts
    for i, tr in enumerate(trajs):
        if tr.ts != ts:
            raise ValueError(f"trajectory {i} has ts={tr.ts}, expected {ts}")
        if len(tr.states) < 2:
            raise ValueError(f"trajectory {i} has fewer than 2 states")
    X = np.concatenate([tr.states[:-1] for tr in trajs]).T
    Xn = np.concatenate([tr.states[1:] for tr in trajs]).T
    U = np.concatenate([tr.controls for tr in trajs]).T
    Z = lifting.lift(X.T).T
    Zp = lifting.lift(Xn.T).T
    return SnapshotData(X=X, Z=Z, Zp=Zp, U=U, UkronZ=kron_cols(U, Z))


def regressor(data: SnapshotData) -> np.ndarray:
    return np.vstack([data.Z, data.U, data.UkronZ])


def split_coefficients(W: np.ndarray):
    N = lifting.N_OBS
    return W[:, :N], W[:, N : N + N_CONTROL], W[:, N + N_CONTROL :]


def lifted_residual(data: SnapshotData, A, B, H) -> float:
    """``||Z' - A Z - B U - H (U⊗Z)||_F / sqrt(T)``."""
    R = data.Zp - A @ data.Z - B @ data.U - H @ data.UkronZ
    return float(np.linalg.norm(R) / np.sqrt(data.T))


def fit(data: SnapshotData, tol: float = DEFAULT_RCOND, ts: float | None = None, meta=None) -> KoopmanModel:
    """Least-squares bilinear model from snapshot data."""
    W = lstsq_min_norm(regressor(data), data.Zp, tol)
    A, B, H = split_coefficients(W)
    C = lstsq_min_norm(data.Z, data.X, tol)
    training_meta = dict(meta or {})
    training_meta["samples"] = data.T
    training_meta["residual"] = lifted_residual(data, A, B, H)
    training_meta.setdefault("rmse_convention", "joint over (x, y, psi), pooled over samples")
    return KoopmanModel(A=A, B=B, H=H, C=C, ts=1.0 if ts is None else ts, training_meta=training_meta)


def fit_trajectories(trajs: Sequence[Trajectory], tol: float = DEFAULT_RCOND, meta=None) -> KoopmanModel:
    trajs = list(trajs)
    return fit(assemble(trajs), tol=tol, ts=trajs[0].ts, meta=meta)


def predict_step(model: KoopmanModel, s, u) -> np.ndarray:
    """Lift, evolve, project: ``C (A φ(s) + B u + H (u ⊗ φ(s)))``."""
    z = lifting.lift(s)
    u = np.asarray(u, dtype=float)
    zp = model.A @ z + model.B @ u + model.H @ kron_vec(u, z)
    return lifting.project(model.C, zp)


def predict_trajectory(model: KoopmanModel, x0, controls) -> Trajectory:
    """Open-loop rollout re-lifting the predicted state at every step."""
    controls = np.asarray(controls, dtype=float).reshape(-1, N_CONTROL)
    if len(controls) == 0:
        raise ValueError("controls must be nonempty")
    states = np.empty((len(controls) + 1, N_STATE))
    states[0] = x0
    for k, u in enumerate(controls):
        states[k + 1] = predict_step(model, states[k], u)
        if not np.all(np.isfinite(states[k + 1])):
            raise NonFiniteStateError(k, "prediction")
    return Trajectory(model.ts, states, controls)


def predict_batch(model: KoopmanModel, x0, controls) -> np.ndarray:
    """Vectorized :func:`predict_trajectory` for (B, 3) starts and (B, T, 2) controls."""
    x0 = np.asarray(x0, dtype=float)
    controls = np.asarray(controls, dtype=float)
    B, T, _ = controls.shape
    out = np.empty((B, T + 1, N_STATE))
    out[:, 0] = x0
    for k in range(T):
        out[:, k + 1] = model.step(out[:, k], controls[:, k])
    bad = ~np.all(np.isfinite(out), axis=(0, 2))
    if bad.any():
        raise NonFiniteStateError(int(np.argmax(bad)) - 1, "prediction")
    return out


def rmse_percent(truth: Trajectory | np.ndarray, pred: Trajectory | np.ndarray) -> float:
    """``100 * sqrt(sum_k ||x_k - xhat_k||^2 / N)`` over all samples ``k``."""
    a = truth.states if isinstance(truth, Trajectory) else np.asarray(truth, dtype=float)
    b = pred.states if isinstance(pred, Trajectory) else np.asarray(pred, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    a = a.reshape(-1, a.shape[-1])
    b = b.reshape(-1, b.shape[-1])
    return float(100.0 * np.sqrt(np.sum((a - b) ** 2) / len(a)))


def holdout_rmse(model: KoopmanModel, trajs: Sequence[Trajectory]) -> float:
    """Open-loop RMSE% of ``model`` on equal-length trajectories, each started from its true x0."""
    trajs = list(trajs)
    lengths = {len(t.controls) for t in trajs}
    if len(lengths) != 1:
        raise ValueError("held-out trajectories must share one length")
    truth = np.stack([t.states for t in trajs])
    pred = predict_batch(model, truth[:, 0], np.stack([t.controls for t in trajs]))
    return rmse_percent(truth, pred)
