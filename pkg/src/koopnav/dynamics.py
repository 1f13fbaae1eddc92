"""Differential-drive plant with proportional stochastic velocity slip.

State is ``(x, y, psi)`` with ``psi`` unwrapped; control is ``(v, omega)``.
The perturbed kinematics are

    xdot   = (v + beta*v) cos(psi) + alpha*v sin(psi)
    ydot   = (v + beta*v) sin(psi) - alpha*v cos(psi)
    psidot = omega + gamma*omega

with ``alpha, beta, gamma`` independent exponentials of mean ``lam``.
``lam = 0`` is the nominal unicycle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

N_STATE = 3
N_CONTROL = 2


class ResampleMode(str, Enum):
    PER_STEP = "per_step"
    PER_TRAJECTORY = "per_trajectory"


class NonFiniteStateError(FloatingPointError):
    """Integration produced NaN/Inf; ``step`` is the offending step index."""

    def __init__(self, step: int, what: str = "state"):
        self.step = step
        super().__init__(f"non-finite {what} at step {step}")


@dataclass(frozen=True)
class PerturbationSpec:
    lam: float = 0.0
    resample_mode: ResampleMode = ResampleMode.PER_STEP

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lambda must be a finite nonnegative number, got {self.lam}")
        object.__setattr__(self, "resample_mode", ResampleMode(self.resample_mode))

    @property
    def nominal(self) -> bool:
        return self.lam == 0.0


NOMINAL = PerturbationSpec(0.0)


@dataclass
class Trajectory:
    """Sampled rollout: ``states`` is (T+1, 3), ``controls`` is (T, 2)."""

    ts: float
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(-1, N_STATE)
        self.controls = np.asarray(self.controls, dtype=float).reshape(-1, N_CONTROL)
        if self.ts <= 0:
            raise ValueError("ts must be positive")
        if len(self.states) != len(self.controls) + 1:
            raise ValueError(
                f"need len(states) == len(controls) + 1, got {len(self.states)} "
                f"and {len(self.controls)}"
            )

    def __len__(self) -> int:
        return len(self.states)

    @property
    def times(self) -> np.ndarray:
        return self.ts * np.arange(len(self.states))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            write_trajectory_csv(self, fh)

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if len(rows) < 1:
            raise ValueError(f"{path}: empty trajectory")
        t = np.array([float(r["t"]) for r in rows])
        states = np.array([[float(r["x"]), float(r["y"]), float(r["psi"])] for r in rows])
        controls = np.array([[float(r["v"]), float(r["omega"])] for r in rows[:-1]])
        ts = float(t[1] - t[0]) if len(t) > 1 else 1.0
        return cls(ts, states, controls.reshape(-1, 2))


def write_trajectory_csv(traj: Trajectory, fh) -> None:
    w = csv.writer(fh)
    w.writerow(["t", "x", "y", "psi", "v", "omega"])
    for k, s in enumerate(traj.states):
        t = repr(float(k * traj.ts))
        row = [t] + [repr(float(c)) for c in s]
        if k < len(traj.controls):
            row += [repr(float(c)) for c in traj.controls[k]]
        else:
            row += ["", ""]
        w.writerow(row)


def sample_perturbation(spec: PerturbationSpec, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw ``(alpha, beta, gamma)``, each exponential with mean ``spec.lam``.

    ``size`` prepends batch dimensions. The nominal spec returns exact zeros and
    does not consume the random stream.
    """
    shape = (N_STATE,) if size is None else tuple(np.atleast_1d(size)) + (N_STATE,)
    if spec.lam == 0.0:
        return np.zeros(shape)
    return rng.exponential(spec.lam, size=shape)


def perturbed_derivative(s, u, p) -> np.ndarray:
    """Time derivative of the perturbed unicycle; broadcasts over leading axes."""
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    psi = s[..., 2]
    v, w = u[..., 0], u[..., 1]
    alpha, beta, gamma = p[..., 0], p[..., 1], p[..., 2]
    c, sn = np.cos(psi), np.sin(psi)
    fwd = v + beta * v
    lat = alpha * v
    return np.stack([fwd * c + lat * sn, fwd * sn - lat * c, w + gamma * w], axis=-1)


def rk4_step(s, u, p, ts: float) -> np.ndarray:
    """One classical Runge-Kutta step with ``u`` and ``p`` held constant."""
    s = np.asarray(s, dtype=float)
    k1 = perturbed_derivative(s, u, p)
    k2 = perturbed_derivative(s + 0.5 * ts * k1, u, p)
    k3 = perturbed_derivative(s + 0.5 * ts * k2, u, p)
    k4 = perturbed_derivative(s + ts * k3, u, p)
    return s + (ts / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _nominal_jacobians(s, u):
    # d(xdot)/ds and d(xdot)/du of the unperturbed field, batched over leading axes.
    psi = s[..., 2]
    v = u[..., 0]
    c, sn = np.cos(psi), np.sin(psi)
    shp = psi.shape
    Fs = np.zeros(shp + (3, 3))
    Fs[..., 0, 2] = -v * sn
    Fs[..., 1, 2] = v * c
    Fu = np.zeros(shp + (3, 2))
    Fu[..., 0, 0] = c
    Fu[..., 1, 0] = sn
    Fu[..., 2, 1] = 1.0
    return Fs, Fu


def rk4_step_jac(s, u, ts: float):
    """Nominal RK4 step and its Jacobians w.r.t. state and control.

    Batched over leading axes: returns ``(s_next, dS, dU)`` with shapes
    ``(..., 3)``, ``(..., 3, 3)``, ``(..., 3, 2)``.
    """
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    zero = np.zeros(3)
    eye = np.broadcast_to(np.eye(3), s.shape[:-1] + (3, 3))

    def stage(x, dx_ds, dx_du):
        k = perturbed_derivative(x, u, zero)
        Fs, Fu = _nominal_jacobians(x, u)
        return k, Fs @ dx_ds, Fs @ dx_du + Fu

    k1, k1s, k1u = stage(s, eye, 0.0 * eye[..., :2])
    h = 0.5 * ts
    k2, k2s, k2u = stage(s + h * k1, eye + h * k1s, h * k1u)
    k3, k3s, k3u = stage(s + h * k2, eye + h * k2s, h * k2u)
    k4, k4s, k4u = stage(s + ts * k3, eye + ts * k3s, ts * k3u)
    w = ts / 6.0
    s_next = s + w * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    dS = eye + w * (k1s + 2.0 * k2s + 2.0 * k3s + k4s)
    dU = w * (k1u + 2.0 * k2u + 2.0 * k3u + k4u)
    return s_next, dS, dU


def simulate(x0, controls, ts: float, spec: PerturbationSpec, rng: np.random.Generator) -> Trajectory:
    """Roll the perturbed plant forward under ``controls``.

    Per-step mode draws a fresh ``(alpha, beta, gamma)`` before every step;
    per-trajectory mode draws once up front.
    """
    controls = np.asarray(controls, dtype=float).reshape(-1, N_CONTROL)
    if len(controls) == 0:
        raise ValueError("controls must be nonempty")
    if ts <= 0:
        raise ValueError("ts must be positive")
    T = len(controls)
    states = np.empty((T + 1, N_STATE))
    states[0] = np.asarray(x0, dtype=float)
    if spec.resample_mode is ResampleMode.PER_TRAJECTORY:
        p_fixed = sample_perturbation(spec, rng)
    for k in range(T):
        if spec.resample_mode is ResampleMode.PER_STEP:
            p = sample_perturbation(spec, rng)
        else:
            p = p_fixed
        states[k + 1] = rk4_step(states[k], controls[k], p, ts)
        if not np.all(np.isfinite(states[k + 1])):
            raise NonFiniteStateError(k)
    return Trajectory(ts, states, controls)


def simulate_batch(x0, controls, ts: float, spec: PerturbationSpec, rng: np.random.Generator) -> np.ndarray:
    """Vectorized rollout of many trajectories at once.

    ``x0`` is (B, 3), ``controls`` is (B, T, 2); returns states (B, T+1, 3).
    Perturbations are drawn as one (B, T, 3) block (or (B, 3) per trajectory).
    """
    x0 = np.asarray(x0, dtype=float)
    controls = np.asarray(controls, dtype=float)
    B, T, _ = controls.shape
    if spec.resample_mode is ResampleMode.PER_STEP:
        P = sample_perturbation(spec, rng, size=(B, T))
    else:
        P = np.repeat(sample_perturbation(spec, rng, size=B)[:, None, :], T, axis=1)
    states = np.empty((B, T + 1, N_STATE))
    states[:, 0] = x0
    for k in range(T):
        states[:, k + 1] = rk4_step(states[:, k], controls[:, k], P[:, k], ts)
    bad = ~np.all(np.isfinite(states), axis=(0, 2))
    if bad.any():
        raise NonFiniteStateError(int(np.argmax(bad)) - 1)
    return states


def random_training_set(
    n_traj: int,
    n_steps: int,
    ts: float,
    spec: PerturbationSpec,
    rng: np.random.Generator,
    control_box=(-1.0, 1.0, -1.0, 1.0),
    x0_box=(-1.0, 1.0),
) -> list[Trajectory]:
    """Trajectories driven by i.i.d. uniform controls from uniform initial poses."""
    vlo, vhi, wlo, whi = control_box
    x0 = rng.uniform(x0_box[0], x0_box[1], size=(n_traj, N_STATE))
    lo = np.array([vlo, wlo])
    hi = np.array([vhi, whi])
    U = rng.uniform(lo, hi, size=(n_traj, n_steps, N_CONTROL))
    X = simulate_batch(x0, U, ts, spec, rng)
    return [Trajectory(ts, X[i], U[i]) for i in range(n_traj)]
