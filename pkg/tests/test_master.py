import numpy as np
import pytest

from nmjumps import master as ms
from nmjumps import tls
from nmjumps.liouville import random_density_matrix

from oracles import STATIONARY


@pytest.fixture(scope="module")
def spec_tls(tls_params):
    # default figure step 1/(200γ) on the output grid, samples at half of it
    return tls.closed_form_kernels(tls_params).kernel_spec(0.0025, 40.0)


def test_zero_kernels_keep_state_constant(rng):
    rho0 = random_density_matrix(3, rng)
    spec = ms.KernelSpec(np.zeros((9, 9)), np.zeros((101, 9, 9)), 0.01, reset=np.eye(3) / 3)
    for integrate in (ms.integrate_local_nonlocal, ms.integrate_renewal_master):
        sol = integrate(spec, rho0, 1.0)
        assert np.allclose(sol.states, rho0, atol=1e-15)


def test_local_nonlocal_matches_closed_form(tls_params, spec_tls):
    rho0 = tls.y_minus_state()
    sol = ms.integrate_local_nonlocal(spec_tls, rho0, 10.0)
    exact = tls.analytic_solution(tls_params, rho0, sol.t)
    assert sol.t[1] == pytest.approx(0.005)
    assert np.max(np.abs(sol.states - exact)) < 1e-6


def test_second_order_convergence(tls_params):
    rho0 = tls.y_minus_state()
    K = tls.closed_form_kernels(tls_params)
    errs = []
    for h in (0.02, 0.01):
        sol = ms.integrate_local_nonlocal(K.kernel_spec(h, 5.0), rho0, 5.0, richardson=False)
        errs.append(np.max(np.abs(sol.states - tls.analytic_solution(tls_params, rho0, sol.t))))
    assert errs[0] / errs[1] >= 3.5


def test_stationary_limit(spec_tls):
    sol = ms.integrate_local_nonlocal(spec_tls, tls.y_minus_state(), 40.0)
    assert np.allclose(sol.states[-1], np.diag(STATIONARY), atol=1e-5)


def test_renewal_master_properties(tls_params, spec_tls, rng):
    # a fresh start at the unconditional limit is not a fixed point of the memory
    # equation: it follows the exact reduced dynamics and relaxes back to ρ∞
    rho_inf = tls.stationary_state(tls_params)
    sol = ms.integrate_renewal_master(spec_tls, rho_inf, 40.0)
    exact = tls.analytic_solution(tls_params, rho_inf, sol.t)
    assert np.max(np.abs(sol.states - exact)) < 1e-6
    assert np.max(np.abs(sol.states[-1] - rho_inf)) < 1e-6
    rho0 = random_density_matrix(2, rng)
    a = ms.integrate_renewal_master(spec_tls, rho0, 10.0)
    b = ms.integrate_local_nonlocal(spec_tls, rho0, 10.0)
    assert np.max(np.abs(a.states - b.states)) < 1e-6
    tr = np.trace(a.states, axis1=1, axis2=2)
    assert np.max(np.abs(tr - 1)) < 1e-10
    herm = np.max(np.abs(a.states - np.conj(np.swapaxes(a.states, 1, 2))))
    assert herm < 1e-9


def test_renewal_master_needs_reset():
    spec = ms.KernelSpec(np.zeros((4, 4)), np.zeros((3, 4, 4)), 0.1)
    with pytest.raises(ValueError):
        ms.integrate_renewal_master(spec, np.eye(2) / 2, 0.2)


def test_horizon_must_be_covered(spec_tls):
    with pytest.raises(ValueError):
        ms.integrate_local_nonlocal(spec_tls, tls.y_minus_state(), 100.0)


def test_relative_entropy_basics(tls_params, rng):
    rho_inf = tls.stationary_state(tls_params)
    assert ms.relative_entropy(rho_inf, rho_inf) == pytest.approx(0.0, abs=1e-14)
    for _ in range(5):
        assert ms.relative_entropy(random_density_matrix(2, rng), rho_inf) >= 0
    # pure state against a full-rank reference is finite; the converse is not
    assert np.isfinite(ms.relative_entropy(tls.y_minus_state(), rho_inf))
    assert ms.relative_entropy(rho_inf, tls.ground_state()) == np.inf
    with pytest.raises(ms.NonPositiveState):
        ms.relative_entropy(np.diag([1.1, -0.1]), rho_inf)
    # base-2 logarithm: a maximally mixed qubit is one bit from a pure state's complement
    assert ms.relative_entropy(np.diag([1.0, 0.0]), np.eye(2) / 2) == pytest.approx(1.0)


def test_backflow_detection(tls_params, spec_tls):
    rho_inf = tls.stationary_state(tls_params)
    y = ms.integrate_local_nonlocal(spec_tls, tls.y_minus_state(), 10.0)
    x = ms.integrate_local_nonlocal(spec_tls, tls.x_minus_state(), 10.0)
    Ey = ms.relative_entropy_series(y.states, rho_inf)
    Ex = ms.relative_entropy_series(x.states, rho_inf)
    assert ms.detect_backflow(y.t, Ey)
    assert ms.detect_backflow(x.t, Ex) == []
    assert np.all(Ey >= 0) and np.all(Ex >= 0)
    late = ms.integrate_local_nonlocal(spec_tls, tls.y_minus_state(), 40.0)
    assert ms.relative_entropy(late.states[-1], rho_inf) < 1e-8


def test_detect_backflow_intervals():
    t = np.arange(6.0)
    E = np.array([3.0, 2.0, 2.5, 2.7, 1.0, 1.0 + 1e-12])
    assert ms.detect_backflow(t, E) == [(1.0, 3.0)]
    assert ms.detect_backflow(t, np.array([1.0, np.inf, 0.5, 0.4, 0.3, 0.2])) == []
