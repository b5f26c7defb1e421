import math

import numpy as np
import pytest

from flowheat import flows, geometry as geo


TWO_PI = 2.0 * math.pi


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def torus():
    return geo.ManifoldModel("flat_torus", 3, 24, periods=(TWO_PI,) * 3)


@pytest.fixture(scope="session")
def torus_kernel():
    """Finer torus for kernel work (spectral resolution at dt >= 0.01)."""
    return geo.ManifoldModel("flat_torus", 3, 96, periods=(TWO_PI,) * 3)


@pytest.fixture(scope="session")
def torus_weighted():
    return geo.ManifoldModel("flat_torus", 3, 64, periods=(TWO_PI,) * 3)


@pytest.fixture(scope="session")
def sphere():
    return geo.ManifoldModel("round_sphere", 3, 256, radius=1.0)


@pytest.fixture(scope="session")
def sphere_fine():
    return geo.ManifoldModel("round_sphere", 3, 1024, radius=1.0)


@pytest.fixture(scope="session")
def warped_perturbed():
    N = 256
    x = np.linspace(0.0, math.pi, N + 1)
    prof = np.sin(x) * (1.0 + 0.08 * np.sin(x) ** 2)
    return geo.ManifoldModel("warped_sphere", 3, N, profile=prof, length=math.pi)


@pytest.fixture(scope="session")
def static_torus_traj(torus_kernel):
    spec = flows.GeneralizedFlowSpec("ricci")
    return flows.evolve(spec, geo.initial_state(torus_kernel), 0.3)


@pytest.fixture(scope="session")
def static_torus_traj_weighted(torus_weighted):
    spec = flows.GeneralizedFlowSpec("ricci")
    return flows.evolve(spec, geo.initial_state(torus_weighted), 0.3)


@pytest.fixture(scope="session")
def shrinking_sphere_traj(sphere):
    spec = flows.GeneralizedFlowSpec("ricci")
    return flows.evolve(spec, geo.initial_state(sphere), 0.2)


@pytest.fixture(scope="session")
def shrinking_sphere_traj_fine(sphere_fine):
    spec = flows.GeneralizedFlowSpec("ricci")
    return flows.evolve(spec, geo.initial_state(sphere_fine), 0.2)


@pytest.fixture(scope="session")
def warped_ricci_traj(warped_perturbed):
    spec = flows.GeneralizedFlowSpec("ricci")
    return flows.evolve(
        spec,
        geo.initial_state(warped_perturbed),
        0.1,
        flows.StepControl(target_rel_change=1e-4, dt_max=5e-5),
    )


@pytest.fixture(scope="session")
def list_flow_traj():
    N = 256
    x = np.linspace(0.0, math.pi, N + 1)
    spec = flows.GeneralizedFlowSpec(
        "list", coupling=2.0, initial_aux=geo.ScalarField(0.3 * np.cos(x))
    )
    model = geo.ManifoldModel("round_sphere", 3, N, radius=1.0)
    return flows.evolve(
        spec,
        geo.initial_state(model),
        0.1,
        flows.StepControl(target_rel_change=1e-4, dt_max=5e-5),
    )
