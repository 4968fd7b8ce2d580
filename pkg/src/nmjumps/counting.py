"""Counting statistics: n-jump decomposition, joint event densities, renewal convolutions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bipartite import BipartiteModel, PropagatorTable, SymmetryCertificate, bipartite_split
from .liouville import expm, kron, partial_trace_ancilla, random_density_matrix, trace_row, unvec, vec
from .markov import SplitGenerator


@dataclass
class JumpExpansion:
    """Unnormalized ``n``-jump states ``rho[n, k]`` at ``t[k]`` and their weights ``p[n, k]``."""

    t: np.ndarray
    rho: np.ndarray
    p: np.ndarray

    @property
    def n_max(self):
        return self.rho.shape[0] - 1

    def total(self):
        return self.p.sum(axis=0)


def markov_propagator_samples(split: SplitGenerator, h, n):
    E = expm(split.D, h)
    T = np.empty((n + 1,) + E.shape, dtype=complex)
    T[0] = np.eye(E.shape[0])
    for k in range(1, n + 1):
        T[k] = E @ T[k - 1]
    return T


def _trapezoid_convolve(T, x, h):
    """``y_k = h * sum'_j T_{k-j} x_j`` with trapezoid end weights."""
    n = T.shape[0] - 1
    y = np.zeros_like(x)
    for k in range(1, n + 1):
        acc = 0.5 * (T[k] @ x[0] + T[0] @ x[k])
        if k > 1:
            acc = acc + np.einsum("kij,kj->i", T[k - 1 : 0 : -1], x[1:k])
        y[k] = h * acc
    return y


def _nested(T, J, rho0, n_max, h):
    x = T @ vec(rho0)
    out = [x]
    for _ in range(n_max):
        x = _trapezoid_convolve(T, x @ J.T, h)
        out.append(x)
    return np.stack(out)


def n_jump_contribution(T, J, rho0, n_max, h, richardson=True):
    """Nested-trapezoid evaluation of ``rho^(n)(t) = ∫ T(t-s) J rho^(n-1)(s) ds``.

    Parameters
    ----------
    T : ndarray, shape (n_steps + 1, d**2, d**2)
        Propagator samples on a uniform grid with step ``h`` (Markovian
        ``exp(t D)`` or a reduced table).
    J : ndarray, shape (d**2, d**2)
        Jump superoperator.
    richardson : bool
        Combine the rules with steps ``2h`` and ``h`` to cancel the ``h**2``
        error term. The result then lives on the grid of step ``2h``.
    """
    T = np.asarray(T)
    d = int(round(np.sqrt(T.shape[1])))
    if richardson:
        n = (T.shape[0] - 1) // 2
        fine = _nested(T[: 2 * n + 1], J, rho0, n_max, h)[:, ::2]
        coarse = _nested(T[: 2 * n + 1 : 2], J, rho0, n_max, 2 * h)
        vecs = (4 * fine - coarse) / 3
        step = 2 * h
    else:
        vecs = _nested(T, J, rho0, n_max, h)
        step = h
    n_pts = vecs.shape[1]
    rho = vecs.reshape(n_max + 1, n_pts, d, d).transpose(0, 1, 3, 2)
    p = np.real(np.trace(rho, axis1=2, axis2=3))
    return JumpExpansion(np.arange(n_pts) * step, rho, p)


def table_propagator(table: PropagatorTable):
    """Exact ``t -> T(t)`` from the bipartite drift behind a table."""
    return lambda t: table.ptrace @ expm(table.drift, t) @ table.embed


def markov_propagator(split: SplitGenerator):
    return lambda t: expm(split.D, t)


def joint_density(propagator, J, rho0, times, t):
    """``Tr[T(t - t_n) J ... J T(t_1) rho0]`` for ordered detection times ``t_1 < ... < t_n <= t``."""
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0) or (times.size and (times[0] < 0 or times[-1] > t)):
        raise ValueError("detection times must be strictly increasing within [0, t]")
    x = vec(rho0)
    prev = 0.0
    for tj in times:
        x = J @ (propagator(tj - prev) @ x)
        prev = tj
    x = propagator(t - prev) @ x
    d = int(round(np.sqrt(x.size)))
    return float(np.real(trace_row(d) @ x))


def renewal_joint_density(survival, waiting, survival_first, waiting_first, times, t):
    """Product form ``P0(t - t_n) * prod w(t_j - t_{j-1}) * w(t_1 | rho0)``.

    ``survival``/``waiting`` refer to the resetting state and the ``*_first``
    functions to the initial state; all take a scalar time.
    """
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0) or (times.size and (times[0] < 0 or times[-1] > t)):
        raise ValueError("detection times must be strictly increasing within [0, t]")
    if times.size == 0:
        return float(survival_first(t))
    val = waiting_first(times[0])
    for a, b in zip(times[:-1], times[1:]):
        val *= waiting(b - a)
    return float(val * survival(t - times[-1]))


def renewal_f_n(w, w_first, n, h):
    """Density of the ``n``-th detection time: ``w_first`` convolved ``n - 1`` times with ``w``."""
    f = np.asarray(w_first, dtype=float)
    w = np.asarray(w, dtype=float)
    for _ in range(n - 1):
        g = np.zeros_like(f)
        for k in range(1, f.size):
            g[k] = h * (0.5 * (w[k] * f[0] + w[0] * f[k]) + np.dot(w[k - 1 : 0 : -1], f[1:k]))
        f = g
    return f


def renewal_contribution(T, reset, f_n, h):
    """``rho^(n)(t) = ∫ T(t - s) reset f_n(s) ds`` by the trapezoid rule."""
    x = np.outer(np.asarray(f_n, dtype=complex), vec(reset))
    y = _trapezoid_convolve(np.asarray(T), x, h)
    d = reset.shape[0]
    return y.reshape(-1, d, d).transpose(0, 2, 1)


def jump_factorization_gap(model: BipartiteModel, cert: SymmetryCertificate, n_probes=8, seed=0):
    """Largest deviation of ``J_bip rho`` from ``J_s[Tr_a rho] ⊗ rho_a`` over random probes."""
    sg = bipartite_split(model)
    J_s = sum(g * np.kron(V.conj(), V) for g, V in zip(cert.gamma_alpha, model.system_ops))
    rng = np.random.default_rng(seed)
    gap = 0.0
    for _ in range(n_probes):
        rho = random_density_matrix(model.dim, rng)
        lhs = unvec(sg.J @ vec(rho))
        rhs = kron(unvec(J_s @ vec(partial_trace_ancilla(rho, model.dims))), cert.reset_ancilla)
        gap = max(gap, float(np.max(np.abs(lhs - rhs))))
    return gap
