"""Trajectories with memory: jumps from the reduced survival probability, evolution in the embedding."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .bipartite import (
    RENEWAL,
    BipartiteModel,
    PropagatorTable,
    SymmetryCertificate,
    bipartite_jump_map,
    bipartite_split,
)
from .liouville import kron, trace_row, unvec, vec
from .markov import (
    DriftPropagator,
    Renewal,
    Trajectory,
    Channel,
    classify_renewal,
    find_jump_time,
    sample_pdp,
    trajectory_rng,
)

MAX_DOUBLINGS = 10


@dataclass(frozen=True)
class Truncated:
    """No jump before the largest horizon tried."""

    horizon: float


class NMSampler:
    """Read-only sampling context shared by all trajectories of one model.

    Holds the bipartite drift powers on the table grid and, for renewal
    certificates, the resetting state whose survival curve is cached once.
    """

    def __init__(self, model: BipartiteModel, cert: SymmetryCertificate, table: PropagatorTable, fast=True):
        self.model = model
        self.cert = cert
        self.table = table
        self.split = bipartite_split(model)
        self.tr = trace_row(model.dim)
        self.prop = DriftPropagator(table.drift, table.h, table.n_steps, self.tr)
        self.rho_a = cert.reset_ancilla
        self.reset_system = None
        if cert.kind == RENEWAL:
            chans = [Channel(V, g) for V, g in zip(model.system_ops, cert.gamma_alpha)]
            kind = classify_renewal(chans)
            if isinstance(kind, Renewal):
                self.reset_system = kind.reset_state
        self.fast = fast and self.reset_system is not None

    def embed(self, rho_s):
        return vec(kron(rho_s, self.rho_a))

    def reset(self, s):
        rho_s, _ = bipartite_jump_map(self.model, unvec(s), self.cert, self.split)
        return self.embed(rho_s)

    @property
    def renewal_vector(self):
        return self.embed(self.reset_system) if self.fast else None


def sample_jump_time_nm(sampler: NMSampler, rho_plus, r):
    """Waiting time ``t`` with ``Tr[T(t) ρ⁺] = r``.

    The search runs over the table horizon and is extended by repeated
    doubling (at most ``2**10`` times the table length) before giving up.
    """
    if not 0.0 < r < 1.0:
        raise ValueError("r must lie in (0, 1)")
    prop, tr = sampler.prop, sampler.tr
    span = prop.n_steps * prop.h
    base = sampler.embed(rho_plus)
    offset = 0.0
    n_chunks = 1
    for _ in range(MAX_DOUBLINGS + 1):
        for _ in range(n_chunks):
            found = find_jump_time(prop, base, tr, r, span)
            if found is not None:
                return offset + found[0]
            base = prop.powers[-1] @ base
            offset += span
        n_chunks = max(1, int(offset / span))
    return Truncated(offset)


def sample_trajectory_nm(sampler: NMSampler, rho0, t_max, seed, index=0, dt_out=None):
    """One measurement record of the reduced system on ``[0, t_max]``.

    The output step ``dt_out`` must be an integer multiple of the table step.
    """
    h = sampler.prop.h
    dt_out = h if dt_out is None else float(dt_out)
    stride = int(round(dt_out / h))
    if stride < 1 or abs(stride * h - dt_out) > 1e-9 * dt_out:
        raise ValueError("output step must be an integer multiple of the table step")
    n_out = int(round(t_max / dt_out))
    if n_out * stride > sampler.prop.n_steps + 1e-9:
        raise ValueError("trajectory horizon exceeds the propagator table")
    states, jt, pre, post, trunc = sample_pdp(
        sampler.prop,
        sampler.embed(rho0),
        sampler.tr,
        n_out,
        stride,
        sampler.table.ptrace,
        sampler.reset,
        trajectory_rng(seed, index),
        sampler.renewal_vector,
    )
    return Trajectory(seed, index, np.arange(n_out + 1) * dt_out, states, jt, pre, post, trunc)


@dataclass
class EnsembleSeries:
    """Mean reduced state and its standard error on a shared grid.

    ``stderr.real``/``stderr.imag`` are the standard errors of the real and
    imaginary parts of each element.
    """

    t: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    n: int
    seed: int
    jump_times: list = field(default_factory=list)
    truncated: int = 0

    def jump_counts(self, t):
        return np.array([int(np.searchsorted(j, t, side="right")) for j in self.jump_times])


class _Moments:
    """Running count, mean and sum of squared deviations (real and imaginary parts)."""

    def __init__(self, shape):
        self.n = 0
        self.mean = np.zeros(shape, dtype=complex)
        self.m2r = np.zeros(shape)
        self.m2i = np.zeros(shape)

    @classmethod
    def of(cls, block):
        m = cls(block.shape[1:])
        m.n = block.shape[0]
        m.mean = block.mean(axis=0)
        dev = block - m.mean
        m.m2r = np.sum(dev.real**2, axis=0)
        m.m2i = np.sum(dev.imag**2, axis=0)
        return m

    def merge(self, other):
        if other.n == 0:
            return self
        if self.n == 0:
            return other
        n = self.n + other.n
        delta = other.mean - self.mean
        out = _Moments(self.mean.shape)
        out.n = n
        out.mean = self.mean + delta * (other.n / n)
        w = self.n * other.n / n
        out.m2r = self.m2r + other.m2r + delta.real**2 * w
        out.m2i = self.m2i + other.m2i + delta.imag**2 * w
        return out


def ensemble_average(trajectories, seed=0):
    """Pointwise mean and standard error of the grid states of ``trajectories``."""
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("no trajectories")
    t = trajectories[0].t
    for tr in trajectories[1:]:
        if tr.t.shape != t.shape or np.max(np.abs(tr.t - t)) > 1e-12:
            raise ValueError("trajectories do not share a time grid")
    m = _Moments.of(np.stack([tr.states for tr in trajectories]))
    return _series(t, m, seed, [tr.jump_times for tr in trajectories], sum(tr.truncated for tr in trajectories))


def _series(t, m, seed, jumps, truncated):
    if m.n > 1:
        se = np.sqrt(m.m2r / (m.n - 1) / m.n) + 1j * np.sqrt(m.m2i / (m.n - 1) / m.n)
    else:
        se = np.zeros_like(m.mean)
    return EnsembleSeries(t, m.mean, se, m.n, seed, jumps, truncated)


def _run_chunk(sampler, rho0, t_max, seed, indices, dt_out):
    trajs = [sample_trajectory_nm(sampler, rho0, t_max, seed, i, dt_out) for i in indices]
    m = _Moments.of(np.stack([tr.states for tr in trajs]))
    return m, [tr.jump_times for tr in trajs], sum(tr.truncated for tr in trajs), trajs[0]


def default_workers():
    return max(1, os.cpu_count() or 1)


def simulate_ensemble(sampler: NMSampler, rho0, t_max, n_traj, seed, dt_out=None, workers=None, chunk=50):
    """Sample ``n_traj`` trajectories and reduce them to an :class:`EnsembleSeries`.

    Trajectories are split into fixed chunks and the partial moments merged in
    chunk order, so the result does not depend on ``workers``.

    Returns
    -------
    series : EnsembleSeries
    first : Trajectory
        The trajectory with index 0, for single-realization output.
    """
    workers = default_workers() if workers is None else int(workers)
    chunks = [range(s, min(s + chunk, n_traj)) for s in range(0, n_traj, chunk)]
    if workers <= 1 or len(chunks) == 1:
        results = [_run_chunk(sampler, rho0, t_max, seed, c, dt_out) for c in chunks]
    else:
        results = Parallel(n_jobs=workers, backend="loky")(
            delayed(_run_chunk)(sampler, rho0, t_max, seed, c, dt_out) for c in chunks
        )
    total = None
    jumps, truncated = [], 0
    for m, j, tr, _ in results:
        total = m if total is None else total.merge(m)
        jumps.extend(j)
        truncated += tr
    t = results[0][3].t
    return _series(t, total, seed, jumps, truncated), results[0][3]


def markov_limit_model(L0, system_ops, rates):
    """Wrap a Markovian model as a bipartite one with a one-dimensional ancilla."""
    d = int(round(math.sqrt(np.asarray(L0).shape[0])))
    r = np.asarray(rates, dtype=float).reshape(len(system_ops), 1, 1)
    return BipartiteModel(d, 1, L0, tuple(system_ops), r)
