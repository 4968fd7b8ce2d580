"""Non-local master equations on a uniform grid and the relative-entropy backflow diagnostic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .liouville import TOL, trace_row, unvec, vec


class NonPositiveState(ValueError):
    """A state has an eigenvalue below the positivity floor."""


class StepRejected(RuntimeError):
    """The implicit step equation was not solved to tolerance."""


@dataclass(frozen=True)
class KernelSpec:
    """Memory superoperator ``local δ(t) + smooth(t)`` sampled with step ``h``.

    ``jump_local`` is the time-local sandwich term of the local/non-local form;
    ``reset`` is the resetting state used by the renewal form.
    """

    local: np.ndarray
    smooth: np.ndarray
    h: float
    jump_local: np.ndarray | None = None
    reset: np.ndarray | None = None

    @property
    def dim(self):
        return int(round(np.sqrt(self.local.shape[0])))

    @property
    def t_max(self):
        return (self.smooth.shape[0] - 1) * self.h

    @classmethod
    def from_function(cls, local, smooth_fn, h, t_max, **kw):
        n = int(np.ceil(t_max / h - 1e-9))
        t = np.arange(n + 1) * h
        return cls(np.asarray(local, dtype=complex), np.asarray(smooth_fn(t), dtype=complex), h, **kw)


@dataclass
class StateSeries:
    t: np.ndarray
    states: np.ndarray

    def element(self, i, j):
        return self.states[:, i, j]


def _volterra(A, K, y0, h, n):
    """Trapezoidal product integration of ``y' = A y + ∫ K(t-s) y(s) ds``.

    Every step solves its implicit linear equation exactly with a cached LU
    factorization, so the scheme is the plain second-order trapezoid rule.
    """
    m = y0.size
    Y = np.empty((n + 1, m), dtype=complex)
    Y[0] = y0
    M = np.eye(m) - 0.5 * h * (A + 0.5 * h * K[0])
    lu = scipy.linalg.lu_factor(M)
    f_prev = A @ y0
    for k in range(1, n + 1):
        hist = 0.5 * K[k] @ y0
        if k > 1:
            hist = hist + np.einsum("kij,kj->i", K[k - 1 : 0 : -1], Y[1:k])
        rhs = Y[k - 1] + 0.5 * h * f_prev + 0.5 * h * h * hist
        y = scipy.linalg.lu_solve(lu, rhs)
        res = np.max(np.abs(M @ y - rhs))
        if res > 1e-6 * max(1.0, np.max(np.abs(rhs))):
            raise StepRejected(f"implicit step residual {res:.2e} at step {k}")
        Y[k] = y
        f_prev = A @ y + h * (0.5 * K[0] @ y + hist)
    return Y


def _integrate(A, K_samples, h, rho0, t_max, richardson):
    n_avail = K_samples.shape[0] - 1
    if richardson:
        n = int(round(t_max / (2 * h)))
        if 2 * n > n_avail:
            raise ValueError("kernel samples do not cover the requested horizon")
        y0 = vec(rho0)
        fine = _volterra(A, K_samples[: 2 * n + 1], y0, h, 2 * n)[::2]
        coarse = _volterra(A, K_samples[: 2 * n + 1 : 2], y0, 2 * h, n)
        Y = (4.0 * fine - coarse) / 3.0
        step = 2 * h
    else:
        n = int(round(t_max / h))
        if n > n_avail:
            raise ValueError("kernel samples do not cover the requested horizon")
        Y = _volterra(A, K_samples[: n + 1], vec(rho0), h, n)
        step = h
    d = int(round(np.sqrt(Y.shape[1])))
    # column stacking: Y[k, i + d*j] is element (i, j)
    states = Y.reshape(-1, d, d).transpose(0, 2, 1)
    return StateSeries(np.arange(Y.shape[0]) * step, states)


def integrate_local_nonlocal(spec: KernelSpec, rho0, t_max, richardson=True):
    """Solve ``ρ' = ∫ D(t-s) ρ(s) ds + J_loc ρ`` with ``D = local δ + smooth``.

    With ``richardson`` the equation is solved at steps ``h`` and ``2h`` and
    extrapolated; the output grid then has step ``2h``.
    """
    A = spec.local + (spec.jump_local if spec.jump_local is not None else 0.0)
    return _integrate(A, spec.smooth, spec.h, rho0, t_max, richardson)


def renewal_projector(reset):
    """``X -> X - reset * Tr[X]`` as a superoperator."""
    d = reset.shape[0]
    return np.eye(d * d) - np.outer(vec(reset), trace_row(d))


def integrate_renewal_master(spec: KernelSpec, rho0, t_max, richardson=True):
    """Solve ``ρ' = ∫ D(t-s) ρ(s) ds - ρ_reset ∫ Tr[D(t-s) ρ(s)] ds``."""
    if spec.reset is None:
        raise ValueError("renewal master equation needs a reset state")
    P = renewal_projector(np.asarray(spec.reset, dtype=complex))
    A = P @ spec.local
    K = np.einsum("ij,njk->nik", P, spec.smooth)
    return _integrate(A, K, spec.h, rho0, t_max, richardson)


def relative_entropy(rho, sigma, floor=1e-14):
    """``Tr[ρ (log2 ρ - log2 σ)]``; infinite when ρ has weight outside the support of σ."""
    w, U = np.linalg.eigh(0.5 * (rho + rho.conj().T))
    if w.min() < -1e-8:
        raise NonPositiveState(f"eigenvalue {w.min():.3e} below -1e-8")
    ws, Us = np.linalg.eigh(0.5 * (sigma + sigma.conj().T))
    w = np.clip(w, 0.0, None)
    keep = w > floor
    s_rho = float(np.sum(w[keep] * np.log2(w[keep])))
    # weights of rho on the eigenvectors of sigma
    weights = np.real(np.einsum("ik,k,ik->i", (Us.conj().T @ U), w, (Us.conj().T @ U).conj()))
    cross = 0.0
    for lam, p in zip(ws, weights):
        if p <= floor:
            continue
        if lam <= floor:
            return np.inf
        cross += p * np.log2(lam)
    return s_rho - cross


def relative_entropy_series(states, rho_inf, floor=1e-14):
    return np.array([relative_entropy(r, rho_inf, floor) for r in states])


def detect_backflow(t, E, noise=1e-9):
    """Maximal grid intervals ``(t_start, t_end)`` on which ``E`` increases by more than ``noise`` per step."""
    t = np.asarray(t)
    E = np.asarray(E, dtype=float)
    dE = np.diff(E)
    up = np.isfinite(dE) & (dE > noise)
    intervals = []
    k = 0
    while k < up.size:
        if up[k]:
            j = k
            while j + 1 < up.size and up[j + 1]:
                j += 1
            intervals.append((float(t[k]), float(t[j + 1])))
            k = j + 1
        else:
            k += 1
    return intervals
