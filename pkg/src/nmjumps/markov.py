"""Markovian quantum jumps: generator split, reset map, interval statistics, sampling."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .liouville import (
    TOL,
    DimensionError,
    ValidationError,
    dag,
    expm,
    random_density_matrix,
    sandwich,
    spost,
    spre,
    trace_row,
    unvec,
    vec,
)


class DarkStateError(RuntimeError):
    """No detectable transition is possible from the given state."""


@dataclass(frozen=True)
class Channel:
    """A monitored Lindblad channel ``rate * C[V]``."""

    V: np.ndarray
    rate: float
    label: str = ""

    def __post_init__(self):
        V = np.asarray(self.V, dtype=complex)
        if V.ndim != 2 or V.shape[0] != V.shape[1]:
            raise DimensionError(f"channel operator must be square, got {V.shape}")
        if not np.isfinite(self.rate) or self.rate < 0:
            raise ValidationError(f"channel rate must be finite and non-negative, got {self.rate}")
        object.__setattr__(self, "V", V)


def operator_set(ops, rates, labels=None) -> tuple[Channel, ...]:
    """Build a validated channel tuple from parallel lists of operators and rates."""
    labels = labels or [f"V{k}" for k in range(len(ops))]
    channels = tuple(Channel(V, float(r), lab) for V, r, lab in zip(ops, rates, labels))
    dims = {c.V.shape[0] for c in channels}
    if len(dims) > 1:
        raise DimensionError(f"channel operators have mixed dimensions {sorted(dims)}")
    return channels


@dataclass(frozen=True)
class JumpModel:
    """Unmonitored generator ``L0`` plus monitored channels."""

    L0: np.ndarray
    channels: tuple[Channel, ...] = ()

    def __post_init__(self):
        L0 = np.asarray(self.L0, dtype=complex)
        d = int(round(math.sqrt(L0.shape[0])))
        if L0.shape != (d * d, d * d):
            raise DimensionError(f"L0 of shape {L0.shape} is not a superoperator")
        for c in self.channels:
            if c.V.shape != (d, d):
                raise DimensionError(f"channel {c.label!r} has shape {c.V.shape}, expected {(d, d)}")
        object.__setattr__(self, "L0", L0)
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def dim(self):
        return int(round(math.sqrt(self.L0.shape[0])))


@dataclass(frozen=True)
class SplitGenerator:
    """Between-jump drift ``D`` and jump part ``J`` with ``D + J`` the full generator."""

    D: np.ndarray
    J: np.ndarray

    @property
    def dim(self):
        return int(round(math.sqrt(self.D.shape[0])))

    @property
    def generator(self):
        return self.D + self.J


def split(model: JumpModel) -> SplitGenerator:
    d = model.dim
    J = np.zeros_like(model.L0)
    anti = np.zeros((d, d), dtype=complex)
    for c in model.channels:
        J += c.rate * sandwich(c.V)
        anti += c.rate * (dag(c.V) @ c.V)
    D = model.L0 - 0.5 * (spre(anti) + spost(anti))
    return SplitGenerator(D=D, J=J)


def jump_map(split: SplitGenerator, rho, floor=TOL.jump_floor):
    """Post-detection state ``J rho / Tr[J rho]``."""
    out = unvec(split.J @ vec(rho))
    norm = np.trace(out).real
    if norm <= floor:
        raise DarkStateError(f"jump intensity {norm:.3e} is below the floor {floor:.1e}")
    return out / norm


def interval_statistics(split: SplitGenerator, rho, t_grid):
    """Survival ``P0``, waiting density ``w`` and conditional rate ``w/P0`` on ``t_grid``."""
    t_grid = np.asarray(t_grid, dtype=float)
    tr = trace_row(split.dim)
    v = vec(rho)
    P0 = np.empty(t_grid.size)
    w = np.empty(t_grid.size)
    for k, t in enumerate(t_grid):
        s = expm(split.D, t) @ v
        P0[k] = (tr @ s).real
        w[k] = -(tr @ (split.D @ s)).real
    with np.errstate(divide="ignore", invalid="ignore"):
        wc = np.where(P0 > 0, w / P0, np.nan)
    return P0, w, wc


@dataclass(frozen=True)
class Renewal:
    reset_state: np.ndarray


@dataclass(frozen=True)
class NonRenewal:
    pass


def _rank_one_right_vector(V, tol=1e-10):
    U, s, Vh = np.linalg.svd(V)
    if s[0] == 0 or (s.size > 1 and s[1] > tol * s[0]):
        return None
    return Vh[0].conj()


def classify_renewal(channels: Sequence[Channel], n_probes=8, seed=0, tol=TOL.renewal_probe):
    """Decide whether detections always reset to the same state.

    The structural check asks for rank-one operators sharing one right vector;
    the behavioural check applies the reset map to random probe states.
    """
    active = [c for c in channels if c.rate > 0]
    if not active:
        return NonRenewal()
    u0 = None
    for c in active:
        u = _rank_one_right_vector(c.V)
        if u is None:
            return NonRenewal()
        if u0 is None:
            u0 = u
        elif abs(np.vdot(u0, u)) < 1 - 1e-10:
            return NonRenewal()
    d = active[0].V.shape[0]
    J = sum(c.rate * sandwich(c.V) for c in active)
    sg = SplitGenerator(D=np.zeros_like(J), J=J)
    rng = np.random.default_rng(seed)
    reset = None
    for _ in range(n_probes):
        probe = random_density_matrix(d, rng)
        out = jump_map(sg, probe)
        if reset is None:
            reset = out
        elif np.max(np.abs(out - reset)) > tol:
            return NonRenewal()
    return Renewal(reset_state=reset)


def trajectory_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Counter-based stream for trajectory ``index`` of a run seeded with ``seed``."""
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def _uniform_open(rng):
    r = rng.random()
    while r == 0.0:
        r = rng.random()
    return r


@dataclass
class Trajectory:
    """One measurement record with its conditional states on the output grid.

    ``states`` are normalized reduced states; ``pre_jump``/``post_jump`` hold the
    left limit and the reset state at every jump.
    """

    seed: int
    index: int
    t: np.ndarray
    states: np.ndarray
    jump_times: np.ndarray
    pre_jump: np.ndarray
    post_jump: np.ndarray
    truncated: bool = False

    @property
    def n_jumps(self):
        return int(self.jump_times.size)

    def jumps_before(self, t):
        return int(np.searchsorted(self.jump_times, t, side="right"))


class DriftPropagator:
    """Cached powers of ``exp(h D)`` plus exact evaluation of ``exp(s D)`` for any ``s``.

    Sub-step exponentials use the eigendecomposition of ``D`` when its
    eigenvector matrix is well conditioned, and Padé otherwise. The trace row
    ``tr`` (if given) is folded into the cached powers so that survival curves
    cost one matrix-vector product.
    """

    def __init__(self, D, h, n_steps, tr=None):
        D = np.asarray(D, dtype=complex)
        n = D.shape[0]
        self.D = D
        self.h = float(h)
        self.n_steps = int(n_steps)
        E = expm(D, self.h)
        powers = np.empty((self.n_steps + 1, n, n), dtype=complex)
        powers[0] = np.eye(n)
        for k in range(1, self.n_steps + 1):
            powers[k] = E @ powers[k - 1]
        self.powers = powers
        self.tr = None if tr is None else np.asarray(tr, dtype=complex)
        self.tr_powers = None if tr is None else self.tr @ powers
        w, V = np.linalg.eig(D)
        self._eig = None
        if np.linalg.cond(V) < 1e8:
            self._eig = (w, V, np.linalg.inv(V))

    def apply(self, sigma, s):
        """``exp(s D) @ sigma`` for a vector ``sigma`` and ``s >= 0``."""
        if s == 0.0:
            return np.array(sigma, dtype=complex)
        if self._eig is not None:
            w, V, Vinv = self._eig
            return V @ (np.exp(w * s) * (Vinv @ sigma))
        return expm(self.D, s) @ sigma

    def survival_curve(self, sigma, tr, n=None):
        n = self.n_steps if n is None else n
        if self.tr_powers is not None and tr is self.tr:
            return np.real(self.tr_powers[: n + 1] @ sigma)
        return np.real((self.powers[: n + 1] @ sigma) @ tr)

    def survival_fn(self, sigma, tr):
        """Scalar function ``s -> Re tr·exp(s D) sigma`` for ``s`` within one grid cell."""
        if self._eig is not None:
            w, V, Vinv = self._eig
            coef = (tr @ V) * (Vinv @ sigma)
            return lambda s: float(np.real(coef @ np.exp(w * s)))
        return lambda s: float(np.real(tr @ (expm(self.D, s) @ sigma)))


def find_jump_time(prop: DriftPropagator, sigma, tr, r, limit, curve=None, cached_states=None):
    """Smallest ``s <= limit`` with ``tr·exp(s D) sigma == r``, or ``None``.

    The survival curve is bracketed on the cached grid and the root refined
    within one cell. Returns ``(s, state_at_s)``.
    """
    h = prop.h
    K = min(prop.n_steps, int(math.floor(limit / h + 1e-12)))
    vals = prop.survival_curve(sigma, tr, K) if curve is None else curve[: K + 1]
    below = np.nonzero(vals <= r)[0]
    if below.size == 0:
        rest = limit - K * h
        base = prop.powers[K] @ sigma if cached_states is None else cached_states[K]
        if rest <= 1e-15 or np.real(tr @ prop.apply(base, rest)) > r:
            return None
        k, cell = K, rest
    else:
        k = int(below[0]) - 1
        if k < 0:
            return 0.0, np.array(sigma, dtype=complex)
        cell = h
        base = prop.powers[k] @ sigma if cached_states is None else cached_states[k]
    f = prop.survival_fn(base, tr)
    lo, hi = 0.0, cell
    if f(hi) - r >= 0:
        s = hi
    elif f(lo) - r <= 0:
        s = lo
    else:
        s = brentq(lambda x: f(x) - r, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    state = prop.apply(base, s)
    if abs(np.real(tr @ state) - r) > TOL.root:
        # flat survival curve: plain bisection down to machine resolution
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if f(mid) > r:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-16 * max(1.0, hi):
                break
        s = hi
        state = prop.apply(base, s)
    return k * h + s, state


def sample_pdp(
    prop: DriftPropagator,
    sigma0,
    tr,
    n_out: int,
    stride: int,
    R: np.ndarray,
    reset: Callable[[np.ndarray], np.ndarray],
    rng: np.random.Generator,
    renewal_state=None,
):
    """Finite-interval jump algorithm on a vectorized state space.

    Parameters
    ----------
    prop : DriftPropagator
        Must cache at least ``n_out * stride`` steps.
    R : ndarray
        Linear map from the internal state vector to the reported vectorized
        matrix (identity, or a partial trace).
    reset : callable
        Maps a normalized pre-jump vector to the normalized post-jump vector;
        may raise :class:`DarkStateError`.
    renewal_state : ndarray, optional
        If given, every reset is known to return this vector and its survival
        curve and propagated states are cached once.

    Returns
    -------
    states, jump_times, pre_jump, post_jump, truncated
    """
    h = prop.h
    N = n_out * stride
    dt_out = h * stride
    t_max = N * h
    d_rep = int(round(math.sqrt(R.shape[0])))
    tr_rep = trace_row(d_rep)
    states = np.empty((n_out + 1, d_rep, d_rep), dtype=complex)
    jumps, pre, post = [], [], []
    truncated = False

    cache_curve = cache_states = None
    if renewal_state is not None:
        cache_states = prop.powers[: N + 1] @ renewal_state
        cache_curve = np.real(cache_states @ tr)

    def report(vecs):
        red = vecs @ R.T
        red = red / np.real(red @ tr_rep)[:, None]
        return red.reshape(-1, d_rep, d_rep).transpose(0, 2, 1)

    def fill(g0, g1, tau, sigma):
        # output points g0..g1-1 lie in [tau, next event)
        if g1 <= g0:
            return
        base = prop.apply(sigma, max(g0 * dt_out - tau, 0.0))
        block = prop.powers[0 : (g1 - g0 - 1) * stride + 1 : stride] @ base
        states[g0:g1] = report(block)

    tau = 0.0
    sigma = np.array(sigma0, dtype=complex)
    g = 0
    cached = False
    while True:
        limit = t_max - tau
        found = None
        if not truncated and limit > 0:
            r = _uniform_open(rng)
            if cached:
                found = find_jump_time(prop, sigma, tr, r, limit, cache_curve, cache_states)
            else:
                found = find_jump_time(prop, sigma, tr, r, limit)
        if found is None:
            fill(g, n_out + 1, tau, sigma)
            break
        s, state = found
        t_jump = tau + s
        g_next = min(n_out + 1, max(g, int(math.ceil(t_jump / dt_out - 1e-12))))
        fill(g, g_next, tau, sigma)
        g = g_next
        state = state / np.real(tr @ state)
        try:
            new = reset(state)
        except DarkStateError:
            truncated = True
            sigma, tau = state, t_jump
            continue
        jumps.append(t_jump)
        pre_post = report(np.stack([state, new]))
        pre.append(pre_post[0])
        post.append(pre_post[1])
        tau = t_jump
        cached = renewal_state is not None
        sigma = renewal_state if cached else new
    shape = (0, d_rep, d_rep)
    return (
        states,
        np.array(jumps, dtype=float),
        np.array(pre) if pre else np.empty(shape, dtype=complex),
        np.array(post) if post else np.empty(shape, dtype=complex),
        truncated,
    )


def _grid(t_max, dt):
    n = int(round(t_max / dt))
    if n < 1 or abs(n * dt - t_max) > 1e-9 * max(1.0, t_max):
        raise ValueError(f"t_max={t_max} is not an integer multiple of dt={dt}")
    return n


def sample_trajectory(split: SplitGenerator, rho0, t_max, dt_grid, seed, index=0, propagator=None):
    """Finite-interval algorithm: jump times from ``P0(Δ|ρ) = r``, deterministic drift between."""
    n = _grid(t_max, dt_grid)
    tr = trace_row(split.dim)
    prop = propagator or DriftPropagator(split.D, dt_grid, n, tr)
    states, jt, pre, post, trunc = sample_pdp(
        prop,
        vec(rho0),
        prop.tr if prop.tr is not None else tr,
        n,
        1,
        np.eye(split.dim**2),
        lambda s: vec(jump_map(split, unvec(s))),
        trajectory_rng(seed, index),
    )
    return Trajectory(seed, index, np.arange(n + 1) * dt_grid, states, jt, pre, post, trunc)


def sample_trajectory_dtstep(split: SplitGenerator, rho0, t_max, dt, seed, index=0):
    """Infinitesimal-step algorithm with per-step jump probability ``dt·Tr[J ρ]``."""
    n = _grid(t_max, dt)
    rng = trajectory_rng(seed, index)
    E = expm(split.D, dt)
    tr = trace_row(split.dim)
    d = split.dim
    sigma = vec(rho0)
    states = np.empty((n + 1, d, d), dtype=complex)
    states[0] = unvec(sigma)
    jumps, pre, post = [], [], []
    warned = False
    truncated = False
    for k in range(n):
        dP = dt * np.real(tr @ (split.J @ sigma))
        if dP > TOL.delta_p_warn and not warned:
            warnings.warn(f"jump probability per step {dP:.3f} exceeds {TOL.delta_p_warn}", RuntimeWarning)
            warned = True
        if rng.random() < dP:
            rho = unvec(sigma)
            try:
                new = jump_map(split, rho)
            except DarkStateError:
                truncated = True
            else:
                jumps.append((k + 1) * dt)
                pre.append(rho)
                post.append(new)
                sigma = vec(new)
        else:
            sigma = E @ sigma
            sigma = sigma / np.real(tr @ sigma)
        states[k + 1] = unvec(sigma)
    shape = (0, d, d)
    return Trajectory(
        seed,
        index,
        np.arange(n + 1) * dt,
        states,
        np.array(jumps, dtype=float),
        np.array(pre) if pre else np.empty(shape, dtype=complex),
        np.array(post) if post else np.empty(shape, dtype=complex),
        truncated,
    )


def delta_p(split: SplitGenerator, rho, dt):
    """Jump probability in ``(t, t + dt)`` given the current normalized state only."""
    return dt * np.real(np.trace(unvec(split.J @ vec(rho))))
