import pytest

from qpert.environment import FiniteCtmcEnvironment
from qpert.params import QueueParams
from qpert.perturbation import PerturbationSpec


@pytest.fixture(scope="session")
def params():
    """Desk-scale queue: lam=1, mu=2, rho=1/2."""
    return QueueParams(1.0, 2.0, 0.05)


@pytest.fixture(scope="session")
def env_const():
    """Single-state environment: any p on it is a constant perturbation."""
    return FiniteCtmcEnvironment([[0.0]])


@pytest.fixture(scope="session")
def env_two_state():
    """Symmetric two-state chain with flip rate 1 (spectral gap 2)."""
    return FiniteCtmcEnvironment([[-1.0, 1.0], [1.0, -1.0]])


@pytest.fixture(scope="session")
def spec_up(env_two_state):
    """p = (0, 1): extra capacity in state 1 only."""
    return PerturbationSpec(env_two_state, [0.0, 1.0])


@pytest.fixture(scope="session")
def spec_down(env_two_state):
    """p = (0, -1): lost capacity in state 1 only."""
    return PerturbationSpec(env_two_state, [0.0, -1.0])


@pytest.fixture(scope="session")
def spec_mixed(env_two_state):
    """p = (-1, 1): signed perturbation."""
    return PerturbationSpec(env_two_state, [-1.0, 1.0])


def assert_within_se(value, target, se, n_se=3.0, label=""):
    """Monte Carlo agreement helper: |value - target| <= n_se * se."""
    err = abs(value - target)
    assert err <= n_se * se, (
        f"{label or 'value'} = {value} vs target {target}: "
        f"off by {err:.3g} > {n_se} * se = {n_se * se:.3g}"
    )
