import numpy as np
import pytest

from nmjumps import bipartite as bp
from nmjumps import tls


@pytest.fixture(scope="session")
def tls_params():
    return tls.TLSParams(gamma=1.0, gamma_prime=1.0, omega=4.0)


@pytest.fixture(scope="session")
def tls_model(tls_params):
    return tls.build_tls_model(tls_params)


@pytest.fixture(scope="session")
def tls_cert(tls_model):
    return bp.certify(tls_model)


@pytest.fixture(scope="session")
def tls_table(tls_model, tls_cert):
    return bp.reduced_propagator(tls_model, tls_cert, 10.0, 0.005)


@pytest.fixture(scope="session")
def tls_kernel(tls_table):
    return bp.extract_memory_kernel(tls_table)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def tls_sampler(tls_model, tls_cert, tls_table):
    from nmjumps.trajectories import NMSampler

    return NMSampler(tls_model, tls_cert, tls_table)


@pytest.fixture(scope="session")
def fig2_ensemble(tls_sampler):
    # N = 2000 trajectories from |y-> on [0, 10], output step 0.01
    from nmjumps.trajectories import simulate_ensemble

    return simulate_ensemble(tls_sampler, tls.y_minus_state(), 10.0, 2000, seed=0, dt_out=0.01)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
