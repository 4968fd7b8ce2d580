"""Dense Liouville-space algebra.

Density matrices are plain complex ``(d, d)`` arrays and superoperators are
``(d**2, d**2)`` arrays acting on column-stacked vectors, so that

    vec(A @ rho @ B^dagger) == kron(conj(B), A) @ vec(rho).

Bipartite spaces are ordered system-first: ``|s, a> -> s * d_a + a``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg


@dataclass(frozen=True)
class Tolerances:
    """Numerical thresholds shared by the whole package."""

    hermitian: float = 1e-12
    trace: float = 1e-10
    positivity: float = 1e-10
    semigroup: float = 1e-9
    jump_floor: float = 1e-14
    separability: float = 1e-9
    factorization: float = 1e-9
    renewal_probe: float = 1e-9
    root: float = 1e-10
    monotonic: float = 1e-9
    ill_conditioned: float = 1e-6
    delta_p_warn: float = 0.1


TOL = Tolerances()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ValidationError(ValueError):
    """An operator violates a structural requirement (e.g. Hermiticity)."""


def _square(A, name="matrix"):
    A = np.asarray(A, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {A.shape}")
    return A


def dag(A):
    return np.conj(np.transpose(A))


def kron(*ops):
    """Kronecker product of any number of matrices (left factor is the slow index)."""
    if not ops:
        raise DimensionError("kron needs at least one operand")
    out = np.asarray(ops[0], dtype=complex)
    for op in ops[1:]:
        out = np.kron(out, np.asarray(op, dtype=complex))
    return out


def vec(rho):
    """Column-stack a square matrix into a vector."""
    rho = _square(rho, "rho")
    return rho.reshape(-1, order="F")


def unvec(v):
    """Inverse of :func:`vec`."""
    v = np.asarray(v, dtype=complex).reshape(-1)
    d = int(round(np.sqrt(v.size)))
    if d * d != v.size:
        raise DimensionError(f"vector length {v.size} is not a perfect square")
    return v.reshape(d, d, order="F")


def trace_row(d):
    """Row vector ``t`` with ``t @ vec(rho) == Tr[rho]``."""
    return vec(np.eye(d)).conj()


def spre(A):
    """Superoperator of ``rho -> A @ rho``."""
    A = _square(A)
    return np.kron(np.eye(A.shape[0]), A)


def spost(B):
    """Superoperator of ``rho -> rho @ B``."""
    B = _square(B)
    return np.kron(B.T, np.eye(B.shape[0]))


def sandwich(A, B=None):
    """Superoperator of ``rho -> A @ rho @ B^dagger`` (``B`` defaults to ``A``)."""
    A = _square(A)
    B = A if B is None else _square(B)
    return np.kron(B.conj(), A)


def dissipator(V):
    """Lindblad channel ``V rho V^† - {V^† V, rho}/2`` as a superoperator."""
    V = _square(V, "V")
    VV = dag(V) @ V
    return sandwich(V) - 0.5 * spre(VV) - 0.5 * spost(VV)


def is_hermitian(A, tol=TOL.hermitian):
    A = np.asarray(A)
    return bool(np.max(np.abs(A - dag(A)), initial=0.0) <= tol)


def hamiltonian_superop(H):
    """Superoperator of ``rho -> -i [H, rho]`` (H in units of rate)."""
    H = _square(H, "H")
    if not is_hermitian(H):
        raise ValidationError("Hamiltonian is not Hermitian")
    return -1j * (spre(H) - spost(H))


def lindblad_generator(H=None, channels=(), dim=None):
    """Full generator ``-i[H, .] + sum_k rate_k C[V_k]``.

    ``channels`` is an iterable of ``(V, rate)`` pairs.
    """
    channels = list(channels)
    if dim is None:
        if H is not None:
            dim = np.shape(H)[0]
        elif channels:
            dim = np.shape(channels[0][0])[0]
        else:
            raise DimensionError("cannot infer dimension of an empty generator")
    L = np.zeros((dim * dim, dim * dim), dtype=complex)
    if H is not None:
        L += hamiltonian_superop(H)
    for V, rate in channels:
        if np.shape(V) != (dim, dim):
            raise DimensionError(f"channel operator of shape {np.shape(V)} in a {dim}-dim space")
        L += rate * dissipator(V)
    return L


def partial_trace_ancilla(rho_sa, dims):
    """Trace out the second (ancilla) factor of a system-ancilla matrix."""
    d_s, d_a = dims
    rho_sa = _square(rho_sa, "rho_sa")
    if rho_sa.shape[0] != d_s * d_a:
        raise DimensionError(f"state of dimension {rho_sa.shape[0]} does not match {d_s}x{d_a}")
    return np.einsum("iaja->ij", rho_sa.reshape(d_s, d_a, d_s, d_a))


def partial_trace_superop(d_s, d_a):
    """Matrix ``P`` with ``P @ vec(rho_sa) == vec(Tr_a rho_sa)``."""
    P = np.zeros((d_s * d_s, (d_s * d_a) ** 2), dtype=complex)
    n = d_s * d_a
    for col in range(n * n):
        i, j = col % n, col // n
        si, ai = divmod(i, d_a)
        sj, aj = divmod(j, d_a)
        if ai == aj:
            P[si + sj * d_s, col] = 1.0
    return P


def embedding_superop(rho_a, d_s):
    """Matrix ``E`` with ``E @ vec(rho_s) == vec(rho_s ⊗ rho_a)``."""
    rho_a = _square(rho_a, "rho_a")
    d_a = rho_a.shape[0]
    E = np.zeros(((d_s * d_a) ** 2, d_s * d_s), dtype=complex)
    for col in range(d_s * d_s):
        e = np.zeros(d_s * d_s, dtype=complex)
        e[col] = 1.0
        E[:, col] = vec(np.kron(unvec(e), rho_a))
    return E


def expm(S, t=1.0):
    """``exp(t S)`` by scaling and squaring with a Padé approximant."""
    if t < 0:
        warnings.warn("expm called with negative time", RuntimeWarning, stacklevel=2)
    S = _square(S, "superoperator")
    return scipy.linalg.expm(t * S)


def expm_eig(S, t=1.0):
    """Eigendecomposition-based exponential, for cross-checks on diagonalizable ``S``."""
    w, V = np.linalg.eig(np.asarray(S, dtype=complex))
    return (V * np.exp(t * w)) @ np.linalg.inv(V)


def check_density_matrix(rho, normalized=True, positive=False, tol=TOL):
    """Raise :class:`ValidationError` unless ``rho`` is a valid (optionally unit-trace) state."""
    rho = _square(rho, "rho")
    if not is_hermitian(rho, tol.hermitian * max(1.0, np.abs(rho).max())):
        raise ValidationError("density matrix is not Hermitian")
    if normalized and abs(np.trace(rho) - 1.0) > tol.trace:
        raise ValidationError(f"density matrix trace {np.trace(rho).real!r} != 1")
    if positive and np.linalg.eigvalsh(rho).min() < -tol.positivity:
        raise ValidationError("density matrix has negative eigenvalues")
    return rho


def ket(index, d):
    v = np.zeros(d, dtype=complex)
    v[index] = 1.0
    return v


def projector(psi):
    psi = np.asarray(psi, dtype=complex)
    return np.outer(psi, psi.conj())


def random_density_matrix(d, rng, rank=None):
    """Random state from a Ginibre ensemble (full rank unless ``rank`` is given)."""
    rank = d if rank is None else rank
    G = rng.normal(size=(d, rank)) + 1j * rng.normal(size=(d, rank))
    rho = G @ dag(G)
    return rho / np.trace(rho)


def random_hermitian(d, rng, scale=1.0):
    A = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return scale * 0.5 * (A + dag(A))
