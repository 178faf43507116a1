import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dpfilter.control import StateSpaceSystem, spectral_radius

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

_ACCEPTANCE = []


def record_acceptance(number, passed, detail):
    line = f"ACCEPTANCE {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    _ACCEPTANCE.append(line)
    print(line)


@pytest.fixture
def acceptance():
    return record_acceptance


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def random_stable_system(rng, max_dim=6, radius=0.95, nx=None, nu=None, ny=None):
    nx = int(rng.integers(1, max_dim + 1)) if nx is None else nx
    nu = int(rng.integers(1, max_dim + 1)) if nu is None else nu
    ny = int(rng.integers(1, max_dim + 1)) if ny is None else ny
    A = rng.standard_normal((nx, nx))
    A *= rng.uniform(0.05, radius) / max(spectral_radius(A), 1e-12)
    return StateSpaceSystem(A, rng.standard_normal((nx, nu)),
                            rng.standard_normal((ny, nx)), rng.standard_normal((ny, nu)))


def traffic_plant():
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    B = np.array([[0.5, 0.0], [1.0, 0.0]])
    C = np.array([[1.0, 0.0]])
    D = np.array([[0.0, 1.0]])
    return StateSpaceSystem(A, B, C, D)


@pytest.fixture(scope="session")
def default_run():
    from dpfilter.traffic import SimulationConfig, run_simulation
    return run_simulation(SimulationConfig(), workers=4)


@pytest.fixture(scope="session")
def cold_start_run():
    from dpfilter.traffic import SimulationConfig, run_simulation
    return run_simulation(SimulationConfig(filter_init_velocity=0.0), workers=4)
