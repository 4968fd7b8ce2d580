import numpy as np
import pytest

from nmjumps import bipartite as bp
from nmjumps import counting as cs
from nmjumps import tls
from nmjumps.liouville import random_density_matrix, unvec, vec
from nmjumps.markov import Channel, JumpModel, split

MINUS = np.diag([0, 1]).astype(complex)
PLUS = np.diag([1, 0]).astype(complex)


@pytest.fixture(scope="module")
def tls_J(tls_model, tls_cert):
    return bp.system_jump_superop(tls_model, tls_cert)


@pytest.fixture(scope="module")
def tls_expansion(tls_table, tls_J):
    # n <= 3 on [0, 3] with the table step
    n = int(round(3.0 / tls_table.h))
    return cs.n_jump_contribution(tls_table.T[: n + 1], tls_J, tls.y_minus_state(), 3, tls_table.h)


def pure_decay(gamma):
    return split(JumpModel(np.zeros((4, 4)), (Channel(tls.SIGMA, gamma),)))


def test_zeroth_order_at_origin(tls_expansion):
    assert np.allclose(tls_expansion.rho[0, 0], tls.y_minus_state(), atol=1e-15)
    assert tls_expansion.n_max == 3
    assert not tls_expansion.rho[1:, 0].any()


def test_expansion_weights_are_probabilities(tls_expansion):
    assert np.all(tls_expansion.p >= -1e-12) and np.all(tls_expansion.p <= 1 + 1e-12)
    assert np.all(tls_expansion.total() <= 1 + 1e-8)


def poisson_counter(gamma):
    # the click leaves |+> in place, so counts form a Poisson process
    return split(JumpModel(np.zeros((4, 4)), (Channel(PLUS, gamma),)))


def test_poisson_one_count_probability():
    gamma, h = 0.9, 0.005
    sg = poisson_counter(gamma)
    T = cs.markov_propagator_samples(sg, h, 600)
    exp = cs.n_jump_contribution(T, sg.J, PLUS, 2, h)
    t = exp.t
    assert np.allclose(exp.p[0], np.exp(-gamma * t), atol=1e-12)
    assert np.allclose(exp.p[1], gamma * t * np.exp(-gamma * t), atol=1e-9)
    assert np.allclose(exp.p[2], (gamma * t) ** 2 / 2 * np.exp(-gamma * t), atol=1e-9)


def test_pure_decay_counts_at_most_once():
    gamma, h = 0.9, 0.005
    sg = pure_decay(gamma)
    exp = cs.n_jump_contribution(cs.markov_propagator_samples(sg, h, 600), sg.J, PLUS, 2, h)
    assert np.allclose(exp.p[1], 1 - np.exp(-gamma * exp.t), atol=1e-9)
    assert np.max(np.abs(exp.p[2])) < 1e-12


def test_tls_three_jump_sum_at_unit_time(tls_params, tls_expansion):
    k = int(round(1.0 / tls_expansion.t[1]))
    assert tls_expansion.t[k] == pytest.approx(1.0)
    assert abs(tls_expansion.total()[k] - 1) < 1e-3


def test_unravelling_sum_is_bounded_by_remainder(tls_params, tls_expansion):
    k1 = int(round(1.0 / tls_expansion.t[1]))
    t = tls_expansion.t[: k1 + 1]
    exact = tls.analytic_solution(tls_params, tls.y_minus_state(), t)
    partial = tls_expansion.rho[:, : k1 + 1].sum(axis=0)
    rest = 1 - tls_expansion.total()[: k1 + 1]
    dist = np.array([np.abs(np.linalg.eigvalsh(d)).sum() for d in partial - exact])
    # trapezoid error on the shared grid is well below the 4-jump mass
    assert np.all(dist <= rest + 1e-5)


def test_joint_density_no_jumps_is_survival(tls_params, tls_table, tls_J):
    prop = cs.table_propagator(tls_table)
    for t in (0.0, 0.8, 2.5):
        assert cs.joint_density(prop, tls_J, MINUS, [], t) == pytest.approx(
            tls.analytic_survival(tls_params, MINUS, t), abs=1e-12
        )


def test_joint_density_one_click():
    gamma = 1.4
    sg = poisson_counter(gamma)
    prop = cs.markov_propagator(sg)
    decay = pure_decay(gamma)
    for t1 in (0.1, 0.7, 1.9):
        assert cs.joint_density(prop, sg.J, PLUS, [t1], 2.0) == pytest.approx(gamma * np.exp(-gamma * 2.0), abs=1e-12)
        # a decayed emitter stays dark after the click
        val = cs.joint_density(cs.markov_propagator(decay), decay.J, PLUS, [t1], 2.0)
        assert val == pytest.approx(gamma * np.exp(-gamma * t1), abs=1e-12)
    with pytest.raises(ValueError):
        cs.joint_density(prop, sg.J, PLUS, [0.5, 0.2], 2.0)
    with pytest.raises(ValueError):
        cs.joint_density(prop, sg.J, PLUS, [0.5, 2.5], 2.0)


def test_renewal_product_form_equals_operator_form(tls_table, tls_J, rng):
    prop = cs.table_propagator(tls_table)
    rho0 = random_density_matrix(2, rng)

    def stat(rho, which):
        return lambda s: bp.nm_interval_statistics(tls_table, rho, [s])[which][0]

    for _ in range(8):
        n = int(rng.integers(1, 5))
        t = rng.uniform(1.0, 8.0)
        times = np.sort(rng.uniform(0, t, size=n))
        direct = cs.joint_density(prop, tls_J, rho0, times, t)
        product = cs.renewal_joint_density(
            stat(MINUS, 0), stat(MINUS, 1), stat(rho0, 0), stat(rho0, 1), times, t
        )
        assert abs(direct - product) < 1e-8
    assert cs.renewal_joint_density(stat(MINUS, 0), None, stat(rho0, 0), None, [], 1.5) == pytest.approx(
        cs.joint_density(prop, tls_J, rho0, [], 1.5), abs=1e-12
    )


def test_renewal_convolution_matches_nested_quadrature(tls_table, tls_J):
    h = tls_table.h
    n = int(round(3.0 / h))
    T = tls_table.T[: n + 1]
    rho0 = tls.y_minus_state()
    w = bp.nm_interval_statistics(tls_table, MINUS)[1][: n + 1]
    w0 = bp.nm_interval_statistics(tls_table, rho0)[1][: n + 1]
    assert np.array_equal(cs.renewal_f_n(w, w0, 1, h), w0)
    exp = cs.n_jump_contribution(T, tls_J, rho0, 2, h, richardson=False)
    for order in (1, 2):
        f = cs.renewal_f_n(w, w0, order, h)
        assert np.trapezoid(f, dx=h) <= 1 + 1e-12
        rho_n = cs.renewal_contribution(T, MINUS, f, h)
        assert np.max(np.abs(rho_n - exp.rho[order])) < 1e-6


def test_jump_factorization_on_constructed_models(tls_model, tls_cert, rng):
    assert cs.jump_factorization_gap(tls_model, tls_cert) < 1e-12
    for _ in range(3):
        d_a = int(rng.integers(2, 4))
        ops = tuple(rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2)) for _ in range(2))
        g = rng.uniform(0.5, 2, size=2)
        c = rng.uniform(0.1, 1, size=d_a)
        rates = g[:, None, None] * c[None, :, None] * np.ones(d_a)[None, None, :]
        H = rng.normal(size=(2 * d_a, 2 * d_a))
        from nmjumps.liouville import hamiltonian_superop

        model = bp.BipartiteModel(2, d_a, hamiltonian_superop(H + H.T), ops, rates)
        cert = bp.certify(model)
        assert cs.jump_factorization_gap(model, cert) < 1e-12


@pytest.mark.parametrize("t", [1.0, 3.0])
def test_jump_count_histogram_matches_expansion(t, fig2_ensemble, tls_expansion):
    series, _ = fig2_ensemble
    counts = series.jump_counts(t)
    k = int(round(t / tls_expansion.t[1]))
    for n in range(3):
        p = tls_expansion.p[n, k]
        emp = np.mean(counts == n)
        sigma = np.sqrt(p * (1 - p) / series.n)
        assert abs(emp - p) <= 4 * sigma + 1e-4
