"""Observable dictionary ``[1, x, y, psi, cos psi, sin psi]`` and the linear readout."""

from __future__ import annotations

import numpy as np

DICTIONARY_ID = "poly1-trig-v1"
OBSERVABLE_NAMES = ("1", "x", "y", "psi", "cos(psi)", "sin(psi)")
N_OBS = len(OBSERVABLE_NAMES)


def lift(s) -> np.ndarray:
    """Map state(s) ``(..., 3)`` to observables ``(..., 6)``."""
    s = np.asarray(s, dtype=float)
    psi = s[..., 2]
    return np.stack(
        [np.ones_like(psi), s[..., 0], s[..., 1], psi, np.cos(psi), np.sin(psi)],
        axis=-1,
    )


def lift_jac(s) -> np.ndarray:
    """Jacobian of :func:`lift`, shape ``(..., 6, 3)``."""
    s = np.asarray(s, dtype=float)
    psi = s[..., 2]
    J = np.zeros(psi.shape + (N_OBS, 3))
    J[..., 1, 0] = 1.0
    J[..., 2, 1] = 1.0
    J[..., 3, 2] = 1.0
    J[..., 4, 2] = -np.sin(psi)
    J[..., 5, 2] = np.cos(psi)
    return J


def selector() -> np.ndarray:
    """Readout matrix picking ``(x, y, psi)`` straight out of the observables."""
    C = np.zeros((3, N_OBS))
    C[0, 1] = C[1, 2] = C[2, 3] = 1.0
    return C


def project(C, z) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    z = np.asarray(z, dtype=float)
    if C.shape != (3, z.shape[-1]):
        raise ValueError(f"C must be 3x{z.shape[-1]}, got {C.shape}")
    return z @ C.T
