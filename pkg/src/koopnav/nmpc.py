"""Multiple-shooting NMPC solved by an augmented Lagrangian.

Decision variables are the predicted states ``X`` (K+1, 3) and controls
``U`` (K, 2). Dynamics appear as equality constraints
``X[k+1] - f(X[k], U[k]) = 0`` where ``f`` is either the learned bilinear
predictor or the nominal RK4 model. Obstacle clearance and the planar state
box are inequality constraints. ``X[0]`` is pinned to the measured state and
the control box is kept by projection inside a projected-Newton inner loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .dynamics import rk4_step, rk4_step_jac

DEFAULT_Q = (1.0, 5.0, 0.1)
DEFAULT_R = (0.5, 0.05)
DEFAULT_CONTROL_BOX = (-0.6, 0.6, -math.pi / 4, math.pi / 4)
DEFAULT_STATE_BOX = (-2.0, 2.0, -2.0, 2.0)


class Predictor(Protocol):
    ts: float

    def step(self, s, u) -> np.ndarray: ...

    def step_jac(self, s, u) -> tuple[np.ndarray, np.ndarray, np.ndarray]: ...

    def step_hess(self, s, u, y) -> np.ndarray: ...


def fd_step_hess(predictor, s, u, y, eps: float = 1e-6, dirs=range(5)) -> np.ndarray:
    """Hessian of ``y · f`` by central differences of the analytic Jacobian.

    Only the coordinates in ``dirs`` (indices into ``(x, y, psi, v, omega)``)
    are perturbed; rows and columns outside them are left at zero.
    """
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    dirs = list(dirs)
    m = len(dirs)
    # every perturbed point in one batched Jacobian call
    E = np.concatenate([np.eye(5)[dirs], -np.eye(5)[dirs]]) * eps
    E = E.reshape((2 * m,) + (1,) * (s.ndim - 1) + (5,))
    _, dS, dU = predictor.step_jac(s + E[..., :3], u + E[..., 3:])
    G = np.concatenate([np.einsum("...a,...ai->...i", y, dS), np.einsum("...a,...ai->...i", y, dU)], axis=-1)
    out = np.zeros(s.shape[:-1] + (5, 5))
    out[..., dirs, :] = np.moveaxis((G[:m] - G[m:]) / (2 * eps), 0, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


@dataclass(frozen=True)
class NominalPredictor:
    """Unperturbed unicycle integrated with one RK4 step."""

    ts: float = 0.1

    def step(self, s, u):
        return rk4_step(s, u, np.zeros(3), self.ts)

    def step_jac(self, s, u):
        return rk4_step_jac(s, u, self.ts)

    def step_hess(self, s, u, y):
        # the step is a translation in (x, y), so only psi, v and omega carry curvature
        return fd_step_hess(self, s, u, y, dirs=(2, 3, 4))


@dataclass(frozen=True)
class Obstacle:
    cx: float
    cy: float
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("obstacle radius must be positive")


@dataclass
class OcpSpec:
    predictor: Predictor
    x_ref: np.ndarray = field(default_factory=lambda: np.zeros(3))
    horizon: int = 20
    Q: Sequence[float] = DEFAULT_Q
    R: Sequence[float] = DEFAULT_R
    control_box: Sequence[float] = DEFAULT_CONTROL_BOX
    state_box: Sequence[float] = DEFAULT_STATE_BOX
    obstacles: Sequence[Obstacle] = ()
    robot_radius: float = 0.15
    # extra clearance demanded by the planner so converged plans stay strictly outside obstacles
    obstacle_backoff: float = 1e-4

    def __post_init__(self):
        self.x_ref = np.asarray(self.x_ref, dtype=float)
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if np.any(self.Q < 0) or np.any(self.R < 0):
            raise ValueError("Q and R weights must be nonnegative")
        vlo, vhi, wlo, whi = self.control_box
        if not (vlo < vhi and wlo < whi):
            raise ValueError("control box must have lo < hi")
        if not self.robot_radius > 0:
            raise ValueError("robot_radius must be positive")
        if self.obstacle_backoff < 0:
            raise ValueError("obstacle_backoff must be nonnegative")
        self.obstacles = tuple(self.obstacles)


@dataclass(frozen=True)
class SolverConfig:
    tol_opt: float = 1e-6
    tol_feas: float = 1e-6
    max_outer: int = 30
    max_inner: int = 200
    penalty_init: float = 1e3
    penalty_growth: float = 10.0
    penalty_max: float = 1e9
    # a warm start inherits the previous penalty, clipped so it cannot ratchet up forever
    warm_penalty_cap: float = 1e5
    # outer iterations without a 1% drop in violation before the problem is declared locally infeasible
    stall_outer: int = 3

    def __post_init__(self):
        for name in ("tol_opt", "tol_feas", "max_outer", "max_inner", "penalty_init", "warm_penalty_cap", "stall_outer"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.penalty_growth > 1:
            raise ValueError("penalty_growth must exceed 1")


@dataclass
class OcpSolution:
    U: np.ndarray
    X: np.ndarray
    cost: float = float("nan")
    max_violation: float = float("inf")
    outer_iters: int = 0
    inner_iters: int = 0
    converged: bool = False
    kkt: float = float("inf")
    # multiplier estimates, reused (time-shifted) by the next receding-horizon solve
    eq_mult: np.ndarray | None = None
    ineq_mult: np.ndarray | None = None
    penalty: float | None = None


def stage_cost(s, u, spec: OcpSpec) -> float:
    d = np.asarray(s, dtype=float) - spec.x_ref
    u = np.asarray(u, dtype=float)
    return float(d @ (spec.Q * d) + u @ (spec.R * u))


def obstacle_margin(s, o: Obstacle, r: float) -> float:
    """``-||p - c|| + r + r_o``; nonpositive means clear of the obstacle."""
    return -math.hypot(s[0] - o.cx, s[1] - o.cy) + r + o.radius


def dynamics_residual(X, U, spec: OcpSpec, x_current) -> np.ndarray:
    """Rows ``0..K-1`` hold ``X[k+1] - f(X[k], U[k])``; the last row holds ``X[0] - x_current``."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    out = np.empty((len(U) + 1, 3))
    out[:-1] = X[1:] - spec.predictor.step(X[:-1], U)
    out[-1] = X[0] - np.asarray(x_current, dtype=float)
    return out


def horizon_cost(X, U, spec: OcpSpec) -> float:
    """Sum of stage costs over ``k = 0..K-1``."""
    D = np.asarray(X)[:-1] - spec.x_ref
    U = np.asarray(U)
    return float(np.sum(D * D * spec.Q) + np.sum(U * U * spec.R))


def rollout(predictor: Predictor, x0, U) -> np.ndarray:
    U = np.asarray(U, dtype=float)
    X = np.empty((len(U) + 1, 3))
    X[0] = x0
    for k in range(len(U)):
        X[k + 1] = predictor.step(X[k], U[k])
    return X


class Transcription:
    """Augmented-Lagrangian pieces for one receding-horizon problem.

    ``X[0]`` is pinned to ``x_current`` and eliminated, so the free vector is
    ``w = [X[1..K].ravel(), U.ravel()]``. Inequalities per node ``k = 0..K``
    are ordered: one per obstacle, then ``x <= xmax``, ``xmin <= x``,
    ``y <= ymax``, ``ymin <= y``.
    """

    def __init__(self, spec: OcpSpec, x_current):
        self.spec = spec
        K = self.K = spec.horizon
        self.x_current = np.asarray(x_current, dtype=float)
        obs = spec.obstacles
        self.oc = np.array([[o.cx, o.cy] for o in obs]).reshape(-1, 2)
        self.orad = np.array([o.radius + spec.robot_radius + spec.obstacle_backoff for o in obs])
        self.n_obs = len(obs)
        self.n_ineq_node = self.n_obs + 4
        self.nx = 3 * K
        self.n = self.nx + 2 * K
        vlo, vhi, wlo, whi = spec.control_box
        lb = np.full(self.n, -np.inf)
        ub = np.full(self.n, np.inf)
        lb[self.nx :: 2], ub[self.nx :: 2] = vlo, vhi
        lb[self.nx + 1 :: 2], ub[self.nx + 1 :: 2] = wlo, whi
        self.lb, self.ub = lb, ub
        # column indices of (X[k], U[k], X[k+1]) in w for every stage k; X[0] maps to -1
        idx = np.full((K, 8), -1, dtype=int)
        for k in range(K):
            if k > 0:
                idx[k, :3] = 3 * (k - 1) + np.arange(3)
            idx[k, 3:5] = self.nx + 2 * k + np.arange(2)
            idx[k, 5:] = 3 * k + np.arange(3)
        self.stage_idx = idx
        # scatter pattern of the stage blocks into the dense Hessian (X[0] entries dropped)
        keep = (idx[:, :, None] >= 0) & (idx[:, None, :] >= 0)
        self._blk_keep = keep
        self._blk_rows = np.broadcast_to(idx[:, :, None], keep.shape)[keep]
        self._blk_cols = np.broadcast_to(idx[:, None, :], keep.shape)[keep]
        pos = 3 * np.arange(K)[:, None] + np.arange(2)
        self._pos_rows = np.broadcast_to(pos[:, :, None], (K, 2, 2)).ravel()
        self._pos_cols = np.broadcast_to(pos[:, None, :], (K, 2, 2)).ravel()
        self.cost_diag = np.concatenate(
            [np.tile(2.0 * spec.Q, K), np.tile(2.0 * spec.R, K)]
        )
        self.cost_diag[self.nx - 3 : self.nx] = 0.0  # X[K] carries no stage cost

    def split(self, w):
        X = np.empty((self.K + 1, 3))
        X[0] = self.x_current
        X[1:] = w[: self.nx].reshape(self.K, 3)
        return X, w[self.nx :].reshape(self.K, 2)

    def join(self, X, U):
        X = np.asarray(X, dtype=float)
        return np.concatenate([X[1:].ravel(), np.asarray(U, dtype=float).ravel()])

    def project(self, w):
        return np.clip(w, self.lb, self.ub)

    def cost_grad(self, X, U):
        spec = self.spec
        D = X[:-1] - spec.x_ref
        J = float(np.sum(D * D * spec.Q) + np.sum(U * U * spec.R))
        gX = np.zeros_like(X)
        gX[:-1] = 2.0 * D * spec.Q
        gU = 2.0 * U * spec.R
        return J, gX, gU

    def eq(self, X, U):
        fx, dS, dU = self.spec.predictor.step_jac(X[:-1], U)
        return X[1:] - fx, dS, dU

    def ineq(self, X):
        """Values (K+1, c) and planar gradients (K+1, c, 2); also distances to obstacle centres."""
        P = X[:, :2]
        xmin, xmax, ymin, ymax = self.spec.state_box
        G = np.empty((self.K + 1, self.n_ineq_node))
        dG = np.zeros((self.K + 1, self.n_ineq_node, 2))
        dist = np.ones((self.K + 1, self.n_obs))
        if self.n_obs:
            diff = P[:, None, :] - self.oc[None, :, :]
            dist = np.sqrt(np.sum(diff * diff, axis=-1))
            G[:, : self.n_obs] = -dist + self.orad
            dist = np.where(dist > 1e-12, dist, 1e-12)
            dG[:, : self.n_obs, :] = -diff / dist[..., None]
        j = self.n_obs
        G[:, j] = P[:, 0] - xmax
        G[:, j + 1] = xmin - P[:, 0]
        G[:, j + 2] = P[:, 1] - ymax
        G[:, j + 3] = ymin - P[:, 1]
        dG[:, j, 0] = 1.0
        dG[:, j + 1, 0] = -1.0
        dG[:, j + 2, 1] = 1.0
        dG[:, j + 3, 1] = -1.0
        return G, dG, dist

    def violation(self, X, U, include_initial: bool = True) -> float:
        """Max constraint violation; node 0 inequalities are fixed by ``x_current``."""
        h = self.eq(X, U)[0]
        G = self.ineq(X)[0]
        if not include_initial:
            G = G[1:]
        v0 = np.max(np.abs(X[0] - self.x_current))
        return float(max(np.max(np.abs(h)), np.max(G, initial=0.0), v0, 0.0))

    def merit_value(self, w, lam, mu, rho) -> float:
        X, U = self.split(w)
        D = X[:-1] - self.spec.x_ref
        val = float(np.sum(D * D * self.spec.Q) + np.sum(U * U * self.spec.R))
        h = X[1:] - self.spec.predictor.step(X[:-1], U)
        val += np.sum(lam * h) + 0.5 * rho * np.sum(h * h)
        t = np.maximum(0.0, mu + rho * self.ineq(X)[0])
        return float(val + (np.sum(t * t) - np.sum(mu * mu)) / (2.0 * rho))

    def merit(self, w, lam, mu, rho, hessian: bool = False):
        """Augmented Lagrangian value and gradient (and Hessian if asked)."""
        X, U = self.split(w)
        J, gX, gU = self.cost_grad(X, U)
        h, dS, dU = self.eq(X, U)
        y = lam + rho * h
        val = J + np.sum(lam * h) + 0.5 * rho * np.sum(h * h)
        gX[1:] += y
        gX[:-1] -= np.einsum("kij,ki->kj", dS, y)
        gU -= np.einsum("kij,ki->kj", dU, y)
        G, dG, dist = self.ineq(X)
        t = np.maximum(0.0, mu + rho * G)
        val += (np.sum(t * t) - np.sum(mu * mu)) / (2.0 * rho)
        gX[:, :2] += np.einsum("kc,kcd->kd", t, dG)
        grad = np.concatenate([gX[1:].ravel(), gU.ravel()])
        if not hessian:
            return val, grad
        return val, grad, self._hessian(X, U, dS, dU, y, t, dG, dist, rho)

    def _hessian(self, X, U, dS, dU, y, t, dG, dist, rho):
        K, n = self.K, self.n
        Hm = np.diag(self.cost_diag)
        # stage Jacobian of h_k w.r.t. (X[k], U[k], X[k+1])
        Js = np.concatenate([-dS, -dU, np.broadcast_to(np.eye(3), (K, 3, 3))], axis=2)
        blocks = rho * np.einsum("kai,kaj->kij", Js, Js)
        blocks[:, :5, :5] -= self.spec.predictor.step_hess(X[:-1], U, y)
        np.add.at(Hm, (self._blk_rows, self._blk_cols), blocks[self._blk_keep])
        # inequality curvature on planar position of nodes 1..K
        act = t[1:] > 0
        if np.any(act):
            tt = np.where(act, t[1:], 0.0)
            g = dG[1:]
            Pk = rho * np.einsum("kc,kci,kcj->kij", act.astype(float), g, g)
            if self.n_obs:
                to = tt[:, : self.n_obs]
                nrm = g[:, : self.n_obs, :]
                curv = (np.eye(2)[None, None] - nrm[..., :, None] * nrm[..., None, :]) / dist[1:, :, None, None]
                Pk -= np.einsum("kc,kcij->kij", to, curv)
            np.add.at(Hm, (self._pos_rows, self._pos_cols), Pk.ravel())
        return Hm


def _shift_rows(a: np.ndarray) -> np.ndarray:
    return np.concatenate([a[1:], a[-1:]], axis=0)


def warm_start_shift(prev: OcpSolution, predictor: Predictor, x_current) -> OcpSolution:
    """Shift controls left (duplicating the last) and re-roll states from ``x_current``."""
    U = _shift_rows(np.asarray(prev.U, dtype=float))
    X = rollout(predictor, x_current, U)
    guess = OcpSolution(U=U, X=X)
    if prev.eq_mult is not None:
        guess.eq_mult = _shift_rows(prev.eq_mult)
        guess.ineq_mult = _shift_rows(prev.ineq_mult)
        guess.penalty = prev.penalty
    return guess


def initial_guess(spec: OcpSpec, x_current) -> OcpSolution:
    K = spec.horizon
    return OcpSolution(U=np.zeros((K, 2)), X=np.tile(np.asarray(x_current, dtype=float), (K + 1, 1)))


def _projected_newton(tr: Transcription, w, lam, mu, rho, tol, max_iter):
    """Minimize the AL subproblem over the control box.

    Each step minimizes the (shifted) quadratic model over the box exactly, so
    the whole segment to the model minimizer stays feasible and is a descent
    direction; an Armijo backtrack along it follows.
    """
    lb, ub = tr.lb, tr.ub
    f, g, H = tr.merit(w, lam, mu, rho, hessian=True)
    it = 0
    pg = np.max(np.abs(w - tr.project(w - g)), initial=0.0)
    while it < max_iter and pg > tol:
        it += 1
        d = _box_qp(H, g, lb - w, ub - w)
        slope = float(g @ d)
        step = 1.0
        accepted = False
        for _ in range(40):
            w_new = np.clip(w + step * d, lb, ub)
            f_new = tr.merit_value(w_new, lam, mu, rho)
            # slack of a few ulps of f so roundoff cannot stall the final Newton steps
            if slope < 0 and f_new <= f + 1e-4 * step * slope + 10 * np.finfo(float).eps * max(1.0, abs(f)):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # fall back to a projected-gradient step before giving up
            w_new = tr.project(w - 1e-3 * g / max(1.0, np.max(np.abs(g))))
            f_new = tr.merit_value(w_new, lam, mu, rho)
            if f_new >= f:
                break
        w = w_new
        f, g, H = tr.merit(w, lam, mu, rho, hessian=True)
        pg = np.max(np.abs(w - tr.project(w - g)), initial=0.0)
    return w, g, pg, it


def _shifted_cholesky(Hf, shift=0.0):
    """Cholesky factor of ``Hf + s*I`` for the smallest tried ``s >= shift``; returns ``(L, s)``."""
    scale = max(1.0, float(np.max(np.abs(np.diag(Hf)), initial=1.0)))
    eye = np.eye(len(Hf))
    while True:
        try:
            return np.linalg.cholesky(Hf + shift * eye), shift
        except np.linalg.LinAlgError:
            shift = 10 * shift if shift else 1e-8 * scale


def _box_qp(H, g, lo, hi, max_iter=200):
    """Minimize ``g@d + d@H@d/2`` subject to ``lo <= d <= hi`` (``lo <= 0 <= hi``).

    Primal active-set method started from ``d = 0`` with the components pushed
    against a bound held fixed. Curvature is shifted where ``H`` is indefinite
    on the free set.
    """
    d = np.zeros(len(g))
    fixed = ((lo >= 0) & (g > 0)) | ((hi <= 0) & (g < 0)) | (lo == hi)
    shift = 0.0
    for k in range(max_iter):
        free = ~fixed
        target = d.copy()
        if free.any():
            rhs = g[free] + H[np.ix_(free, fixed)] @ d[fixed]
            L, shift = _shifted_cholesky(H[np.ix_(free, free)], shift)
            target[free] = -_chol_solve(L, rhs)
        step = target - d
        # largest fraction of the step that keeps every free component in the box
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(step < 0, (lo - d) / step, np.where(step > 0, (hi - d) / step, np.inf))
        ratio = np.where(free, ratio, np.inf)
        j = int(np.argmin(ratio))
        if ratio[j] < 1.0 and k < 3:
            # early passes: fix every component that leaves the box at once
            out = free & ((target <= lo) | (target >= hi))
            d = np.clip(target, lo, hi)
            fixed |= out
            continue
        if ratio[j] < 1.0:
            d = d + max(ratio[j], 0.0) * step
            d[j] = lo[j] if step[j] < 0 else hi[j]
            fixed[j] = True
            continue
        d = target
        # release the fixed component whose model gradient points most strongly inward
        q = g + H @ d + shift * d
        wrong = np.where(fixed & (d <= lo), -q, 0.0) + np.where(fixed & (d >= hi), q, 0.0)
        wrong[lo == hi] = 0.0
        j = int(np.argmax(wrong))
        if wrong[j] <= 1e-12 * max(1.0, np.max(np.abs(q))):
            break
        fixed[j] = False
    return d


def _chol_solve(L, b):
    z = solve_triangular(L, b, lower=True, check_finite=False)
    return solve_triangular(L.T, z, lower=False, check_finite=False)


def solve_ocp(x_current, spec: OcpSpec, init: OcpSolution | None = None, cfg: SolverConfig = SolverConfig()) -> OcpSolution:
    """Solve the horizon problem from ``x_current``; never raises on non-convergence.

    Returns the best iterate found (converged first, then least violation).
    """
    tr = Transcription(spec, x_current)
    K = spec.horizon
    if init is None:
        init = initial_guess(spec, x_current)
    if np.shape(init.U) != (K, 2) or np.shape(init.X) != (K + 1, 3):
        raise ValueError(f"init has shapes {np.shape(init.U)}, {np.shape(init.X)}; horizon is {K}")
    w = tr.project(tr.join(init.X, init.U))
    lam = np.zeros((K, 3)) if init.eq_mult is None else np.array(init.eq_mult, dtype=float)
    mu = np.zeros((K + 1, tr.n_ineq_node)) if init.ineq_mult is None else np.array(init.ineq_mult, dtype=float)
    rho = cfg.penalty_init if init.penalty is None else min(float(init.penalty), cfg.warm_penalty_cap)

    initial_viol = float(np.max(tr.ineq(tr.split(w)[0])[0][0], initial=0.0))
    mu[0] = 0.0
    best = None
    inner_total = 0
    prev_viol = np.inf
    best_viol = np.inf
    stall = 0
    outer = 0
    for outer in range(1, cfg.max_outer + 1):
        w, g, kkt, nit = _projected_newton(tr, w, lam, mu, rho, cfg.tol_opt, cfg.max_inner)
        inner_total += nit
        X, U = tr.split(w)
        h = tr.eq(X, U)[0]
        G = tr.ineq(X)[0]
        # node 0 does not depend on w: report it, but do not chase it with the penalty
        viol = tr.violation(X, U, include_initial=False)
        lam = lam + rho * h
        mu = np.maximum(0.0, mu + rho * G)
        mu[0] = 0.0
        cand = OcpSolution(
            U=U.copy(),
            X=X.copy(),
            cost=horizon_cost(X, U, spec),
            max_violation=max(viol, initial_viol),
            kkt=float(kkt),
            eq_mult=lam.copy(),
            ineq_mult=mu.copy(),
            penalty=rho,
        )
        cand.converged = cand.max_violation <= cfg.tol_feas and kkt <= cfg.tol_opt
        if best is None or _better(cand, best):
            best = cand
        if viol <= cfg.tol_feas and kkt <= cfg.tol_opt:
            break
        stall = stall + 1 if viol > 0.99 * best_viol else 0
        best_viol = min(best_viol, viol)
        if viol > cfg.tol_feas and stall >= cfg.stall_outer:
            break
        if viol > cfg.tol_feas and viol > 0.25 * prev_viol:
            rho = min(rho * cfg.penalty_growth, cfg.penalty_max)
        prev_viol = viol
    best.outer_iters = outer
    best.inner_iters = inner_total
    return best


def _better(a: OcpSolution, b: OcpSolution) -> bool:
    # converged first, then lower violation, then lower cost
    if a.converged != b.converged:
        return a.converged
    if abs(a.max_violation - b.max_violation) > 1e-9:
        return a.max_violation < b.max_violation
    return a.cost < b.cost


def with_reference(spec: OcpSpec, x_ref) -> OcpSpec:
    return replace(spec, x_ref=np.asarray(x_ref, dtype=float))
