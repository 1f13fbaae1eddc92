import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from koopnav import dynamics as dyn
from koopnav import koopman as kp
from koopnav import lifting

finite = st.floats(-1e3, 1e3)
heading = st.floats(-math.pi, math.pi, exclude_min=True)


@pytest.mark.parametrize(
    "s,z",
    [
        ((0, 0, 0), [1, 0, 0, 0, 1, 0]),
        ((1.5, -0.5, math.pi), [1, 1.5, -0.5, math.pi, -1, 0]),
        ((0, 0, math.pi / 2), [1, 0, 0, math.pi / 2, 0, 1]),
    ],
)
def test_lift_examples(s, z):
    np.testing.assert_allclose(lifting.lift(s), z, atol=1e-15)


def test_lift_batched():
    S = np.random.default_rng(0).normal(size=(4, 5, 3))
    Z = lifting.lift(S)
    assert Z.shape == (4, 5, lifting.N_OBS)
    np.testing.assert_array_equal(Z[2, 3], lifting.lift(S[2, 3]))


@given(x=finite, y=finite, psi=st.floats(-100, 100))
def test_constant_first_and_unit_circle(x, y, psi):
    z = lifting.lift((x, y, psi))
    assert z[0] == 1.0
    assert abs(z[4] ** 2 + z[5] ** 2 - 1.0) < 1e-12


@given(a=st.tuples(finite, finite, heading), b=st.tuples(finite, finite, heading))
def test_lift_injective(a, b):
    if np.array_equal(lifting.lift(a), lifting.lift(b)):
        assert a == b


def test_selector_reads_state_back():
    s = np.array([0.3, -1.1, 2.0])
    np.testing.assert_array_equal(lifting.project(lifting.selector(), lifting.lift(s)), s)


def test_zero_readout():
    assert lifting.project(np.zeros((3, 6)), lifting.lift((1, 2, 3))).tolist() == [0, 0, 0]


def test_project_dimension_mismatch():
    with pytest.raises(ValueError):
        lifting.project(np.zeros((3, 5)), lifting.lift((0, 0, 0)))
    with pytest.raises(ValueError):
        lifting.project(np.zeros((2, 6)), lifting.lift((0, 0, 0)))


def test_lift_jacobian_central_differences():
    s = np.array([0.2, -0.4, 0.9])
    J = lifting.lift_jac(s)
    eps = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = eps
        np.testing.assert_allclose(J[:, j], (lifting.lift(s + e) - lifting.lift(s - e)) / (2 * eps), atol=1e-9)


def test_fitted_readout_approaches_selector():
    trajs = dyn.random_training_set(200, 200, 0.1, dyn.NOMINAL, np.random.default_rng(0))
    C = kp.fit_trajectories(trajs).C
    S = np.random.default_rng(1).uniform(-1, 1, size=(100, 3))
    assert np.max(np.abs(lifting.project(C, lifting.lift(S)) - S)) < 1e-6
