import numpy as np
import pytest

from nmjumps.liouville import (
    DimensionError,
    ValidationError,
    dissipator,
    embedding_superop,
    expm,
    expm_eig,
    hamiltonian_superop,
    kron,
    lindblad_generator,
    partial_trace_ancilla,
    partial_trace_superop,
    random_density_matrix,
    random_hermitian,
    trace_row,
    unvec,
    vec,
)
from nmjumps.tls import SIGMA, SX

PLUS = np.diag([1, 0]).astype(complex)
MINUS = np.diag([0, 1]).astype(complex)


def test_kron_identities():
    assert np.array_equal(kron(np.eye(2), np.eye(2)), np.eye(4))
    assert np.array_equal(kron(SX, SX), np.fliplr(np.eye(4)))
    with pytest.raises(DimensionError):
        kron()


def test_kron_action_on_bipartite_basis():
    # σ ⊗ |1><2| with σ = |-><+|: only |+,2> -> |-,1>
    op = kron(SIGMA, np.array([[0, 1], [0, 0]]))
    basis = np.eye(4)
    images = [op @ basis[k] for k in range(4)]
    # |s, a> -> 2 s + a with s: + = 0, - = 1 and a: 1 = 0, 2 = 1
    expected = {1: 2}
    for k in range(4):
        if k in expected:
            assert np.array_equal(images[k], basis[expected[k]])
        else:
            assert not images[k].any()


def test_vec_convention():
    assert np.array_equal(vec(np.eye(2)), [1, 0, 0, 1])
    rho = np.array([[1, 2], [3, 4]])
    assert np.array_equal(vec(rho), [1, 3, 2, 4])
    with pytest.raises(DimensionError):
        unvec(np.ones(3))


def test_vec_roundtrip_and_trace(rng):
    rho = random_density_matrix(3, rng)
    assert np.array_equal(unvec(vec(rho)), rho)
    assert np.isclose(trace_row(3) @ vec(rho), np.trace(rho))


def test_sandwich_convention(rng):
    A = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    B = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    rho = random_density_matrix(3, rng)
    lhs = vec(A @ rho @ B.conj().T)
    rhs = np.kron(B.conj(), A) @ vec(rho)
    assert np.allclose(lhs, rhs, atol=1e-13)


def test_dissipator_zero_and_hand_value():
    assert not dissipator(np.zeros((2, 2))).any()
    out = unvec(dissipator(SIGMA) @ vec(PLUS))
    assert np.allclose(out, MINUS - PLUS, atol=1e-15)
    with pytest.raises(DimensionError):
        dissipator(np.ones((2, 3)))


def test_dissipator_trace_preserving(rng):
    tr = trace_row(3)
    for _ in range(20):
        V = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
        rho = random_density_matrix(3, rng)
        assert abs(tr @ dissipator(V) @ vec(rho)) < 1e-12


def test_hamiltonian_superop():
    assert not hamiltonian_superop(np.zeros((2, 2))).any()
    omega = 4.0
    out = unvec(hamiltonian_superop(omega * SX) @ vec(PLUS))
    expected = 1j * omega * np.array([[0, 1], [-1, 0]])  # iΩ(|+><-| - |-><+|)
    assert np.allclose(out, expected, atol=1e-14)
    with pytest.raises(ValidationError):
        hamiltonian_superop(np.array([[0, 1], [0, 0]]))


def test_unitary_evolution_preserves_spectrum(rng):
    H = random_hermitian(3, rng)
    rho = random_density_matrix(3, rng)
    out = unvec(expm(hamiltonian_superop(H), 0.73) @ vec(rho))
    assert np.allclose(np.linalg.eigvalsh(out), np.linalg.eigvalsh(rho), atol=1e-12)


def test_partial_trace_cases(rng):
    rs, ra = random_density_matrix(2, rng), random_density_matrix(3, rng)
    assert np.allclose(partial_trace_ancilla(np.kron(rs, ra), (2, 3)), rs, atol=1e-14)
    bell = np.zeros(4)
    bell[[0, 3]] = 1 / np.sqrt(2)
    assert np.allclose(partial_trace_ancilla(np.outer(bell, bell), (2, 2)), np.eye(2) / 2)
    rho = random_density_matrix(6, rng)
    assert np.isclose(np.trace(partial_trace_ancilla(rho, (2, 3))), np.trace(rho))
    with pytest.raises(DimensionError):
        partial_trace_ancilla(rho, (2, 2))


def test_partial_trace_and_embedding_superops(rng):
    rho = random_density_matrix(6, rng)
    P = partial_trace_superop(2, 3)
    assert np.allclose(unvec(P @ vec(rho)), partial_trace_ancilla(rho, (2, 3)), atol=1e-14)
    ra = random_density_matrix(3, rng)
    E = embedding_superop(ra, 2)
    rs = random_density_matrix(2, rng)
    assert np.allclose(unvec(E @ vec(rs)), np.kron(rs, ra), atol=1e-14)
    assert np.allclose(P @ E, np.eye(4), atol=1e-14)


def test_expm_basics(rng):
    S = lindblad_generator(random_hermitian(2, rng), [(SIGMA, 0.7)])
    assert np.allclose(expm(S, 0.0), np.eye(4))
    assert np.allclose(expm(np.zeros((4, 4)), 3.0), np.eye(4))
    t1, t2 = 0.4, 1.1
    assert np.allclose(expm(S, t1 + t2), expm(S, t1) @ expm(S, t2), atol=1e-9)
    with pytest.warns(RuntimeWarning):
        expm(S, -1.0)


def test_expm_matches_eigendecomposition(rng):
    for _ in range(5):
        V = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
        S = lindblad_generator(random_hermitian(3, rng), [(V, 0.5)])
        a, b = expm(S, 0.8), expm_eig(S, 0.8)
        assert np.max(np.abs(a - b)) <= 1e-9 * np.max(np.abs(a))


def test_generator_left_null_vector(rng):
    V1 = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    L = lindblad_generator(random_hermitian(3, rng), [(V1, 0.3), (np.eye(3, k=-1), 1.2)])
    assert np.max(np.abs(trace_row(3) @ L)) < 1e-10
