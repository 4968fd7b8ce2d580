"""System-ancilla embedding: rate factorization, reduced propagator and memory kernel."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson

from .liouville import (
    TOL,
    DimensionError,
    ValidationError,
    dissipator,
    embedding_superop,
    expm,
    kron,
    partial_trace_ancilla,
    partial_trace_superop,
    random_density_matrix,
    sandwich,
    trace_row,
    unvec,
    vec,
)
from .markov import (
    Channel,
    DarkStateError,
    JumpModel,
    NonRenewal,
    Renewal,
    SplitGenerator,
    classify_renewal,
    jump_map,
    split,
)

RENEWAL = "Renewal"
NON_RENEWAL = "NonRenewal"


class NotFactorizable(ValueError):
    """The rate tensor admits no factorization ``gamma_a * c_l * d_m``."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


class ClassicalCorrelatedResetWarning(UserWarning):
    """Only the weaker ``gamma_al * d_m`` condition holds; resets would leave classical correlations."""


class SeparabilityViolation(RuntimeError):
    """The bipartite reset did not factor into system and ancilla parts."""


class IllConditioned(RuntimeError):
    """Deconvolution cannot proceed reliably."""


def ancilla_ket(l, d_a):
    v = np.zeros(d_a, dtype=complex)
    v[l] = 1.0
    return v


def ancilla_transition(l, m, d_a):
    """``|a_l><a_m|`` with zero-based labels."""
    return np.outer(ancilla_ket(l, d_a), ancilla_ket(m, d_a))


@dataclass(frozen=True)
class BipartiteModel:
    """Markovian system-ancilla model with monitored operators ``V_a ⊗ |a_l><a_m|``.

    Parameters
    ----------
    d_s, d_a : int
        System and ancilla dimensions.
    L0 : ndarray, shape ((d_s*d_a)**2, (d_s*d_a)**2)
        Unmonitored bipartite generator.
    system_ops : tuple of ndarray
        System operators ``V_a``, each ``(d_s, d_s)``.
    rates : ndarray, shape (n_ops, d_a, d_a)
        Rate tensor ``gamma[a, l, m]`` (units of 1/time).
    """

    d_s: int
    d_a: int
    L0: np.ndarray
    system_ops: tuple
    rates: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        n = self.d_s * self.d_a
        L0 = np.asarray(self.L0, dtype=complex)
        if L0.shape != (n * n, n * n):
            raise DimensionError(f"L0 has shape {L0.shape}, expected {(n * n, n * n)}")
        ops = tuple(np.asarray(V, dtype=complex) for V in self.system_ops)
        for V in ops:
            if V.shape != (self.d_s, self.d_s):
                raise DimensionError(f"system operator of shape {V.shape}, expected {(self.d_s, self.d_s)}")
        rates = np.asarray(self.rates, dtype=float)
        if rates.shape != (len(ops), self.d_a, self.d_a):
            raise DimensionError(f"rate tensor has shape {rates.shape}, expected {(len(ops), self.d_a, self.d_a)}")
        if not np.all(np.isfinite(rates)) or np.any(rates < 0):
            raise ValidationError("rate tensor must be finite and non-negative")
        labels = tuple(self.labels) or tuple(f"V{k}" for k in range(len(ops)))
        object.__setattr__(self, "L0", L0)
        object.__setattr__(self, "system_ops", ops)
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "labels", labels)

    @property
    def dims(self):
        return (self.d_s, self.d_a)

    @property
    def dim(self):
        return self.d_s * self.d_a

    def monitored_operators(self):
        """Yield ``(label, V_alm, rate)`` for every non-zero rate."""
        for a, V in enumerate(self.system_ops):
            for l in range(self.d_a):
                for m in range(self.d_a):
                    g = self.rates[a, l, m]
                    if g > 0:
                        op = kron(V, ancilla_transition(l, m, self.d_a))
                        yield f"{self.labels[a]}[{l + 1},{m + 1}]", op, g

    def jump_model(self) -> JumpModel:
        channels = tuple(Channel(op, g, lab) for lab, op, g in self.monitored_operators())
        return JumpModel(self.L0, channels)

    def generator(self):
        L = self.L0.copy()
        for _, op, g in self.monitored_operators():
            L += g * dissipator(op)
        return L


@dataclass(frozen=True)
class SymmetryCertificate:
    """Factorization ``gamma[a, l, m] = gamma_alpha[a] * c[l] * d[m]`` with ``sum(c) == 1``."""

    kind: str
    gamma_alpha: np.ndarray
    c: np.ndarray
    d: np.ndarray
    residual: float

    @property
    def reset_ancilla(self):
        return np.diag(self.c).astype(complex)

    def reconstruct(self):
        return self.gamma_alpha[:, None, None] * self.c[None, :, None] * self.d[None, None, :]


def _relative_residual(recon, rates):
    scale = np.max(rates)
    return float(np.max(np.abs(recon - rates)) / scale) if scale > 0 else 0.0


def validate_symmetry(rates, mode=None, system_ops=None, tol=TOL.factorization):
    """Factor a rate tensor and classify the resulting reset.

    The factorization is read off the three marginals of the tensor, which is
    exact for any rank-one tensor; the reconstruction residual decides whether
    the input is rank one.

    Parameters
    ----------
    rates : array_like, shape (n_ops, d_a, d_a)
    mode : {"Renewal", "NonRenewal", None}
        Requested kind. ``None`` infers it from ``system_ops`` when given,
        otherwise from whether ``d`` is constant.
    system_ops : sequence of ndarray, optional
        Used to decide renewal structure via :func:`classify_renewal`.

    Raises
    ------
    NotFactorizable
        The tensor is not rank one, or ``NonRenewal`` was needed but ``d`` is
        not constant.
    """
    rates = np.asarray(rates, dtype=float)
    if rates.ndim != 3 or rates.shape[1] != rates.shape[2]:
        raise DimensionError(f"rate tensor must have shape (n_ops, d_a, d_a), got {rates.shape}")
    if not np.all(np.isfinite(rates)) or np.any(rates < 0):
        raise ValidationError("rate tensor must be finite and non-negative")
    if mode not in (None, RENEWAL, NON_RENEWAL):
        raise ValueError(f"unknown mode {mode!r}")
    n_ops, d_a, _ = rates.shape
    total = rates.sum()
    if total == 0:
        c = np.zeros(d_a)
        c[0] = 1.0
        return SymmetryCertificate(mode or NON_RENEWAL, np.zeros(n_ops), c, np.ones(d_a), 0.0)

    G = rates.sum(axis=(1, 2))
    C = rates.sum(axis=(0, 2))
    Dm = rates.sum(axis=(0, 1))
    recon = G[:, None, None] * C[None, :, None] * Dm[None, None, :] / total**2
    residual = _relative_residual(recon, rates)
    if residual > tol:
        flat = rates.reshape(n_ops * d_a, d_a)
        weak = flat.sum(axis=1)[:, None] * flat.sum(axis=0)[None, :] / total
        if _relative_residual(weak, flat) <= tol:
            warnings.warn(
                "rates factor only as gamma_al * d_m: resets leave the ancilla classically "
                "correlated with the channel and the reduced dynamics is not closed",
                ClassicalCorrelatedResetWarning,
                stacklevel=2,
            )
        raise NotFactorizable("rate tensor is not of the form gamma_a c_l d_m", residual)

    dmax = Dm.max()
    c = C / total
    d = Dm / dmax
    gamma_alpha = G * dmax / total

    if mode is None:
        if system_ops is not None:
            chans = [Channel(V, g) for V, g in zip(system_ops, gamma_alpha)]
            mode = RENEWAL if isinstance(classify_renewal(chans), Renewal) else NON_RENEWAL
        else:
            mode = NON_RENEWAL if np.allclose(d, 1.0, rtol=0, atol=tol) else RENEWAL
    elif mode == RENEWAL and system_ops is not None:
        chans = [Channel(V, g) for V, g in zip(system_ops, gamma_alpha)]
        if not isinstance(classify_renewal(chans), Renewal):
            raise ValidationError("system operators do not define a renewal measurement")
    if mode == NON_RENEWAL:
        spread = float(np.max(np.abs(d - 1.0)))
        if spread > tol:
            raise NotFactorizable("non-renewal operators require d_m to be constant", spread)
    return SymmetryCertificate(mode, gamma_alpha, c, d, residual)


def certify(model: BipartiteModel, mode=None):
    return validate_symmetry(model.rates, mode=mode, system_ops=model.system_ops)


def bipartite_split(model: BipartiteModel) -> SplitGenerator:
    return split(model.jump_model())


def system_jump_superop(model: BipartiteModel, cert: SymmetryCertificate):
    """Reduced jump superoperator ``sum_a gamma_a V_a . V_a^†``."""
    d = model.d_s
    J = np.zeros((d * d, d * d), dtype=complex)
    for g, V in zip(cert.gamma_alpha, model.system_ops):
        J += g * sandwich(V)
    return J


def bipartite_jump_map(model: BipartiteModel, rho_sa, cert=None, sg=None, tol=TOL.separability):
    """Reset a bipartite state and return its system factor.

    Returns
    -------
    rho_s : ndarray
        System factor of the post-detection state.
    separable : bool
        Always ``True`` on return; a non-separable result raises instead.
    """
    cert = cert if cert is not None else certify(model)
    sg = sg if sg is not None else bipartite_split(model)
    out = jump_map(sg, rho_sa)
    rho_s = partial_trace_ancilla(out, model.dims)
    gap = np.max(np.abs(out - kron(rho_s, cert.reset_ancilla)))
    if gap > tol:
        raise SeparabilityViolation(f"reset state deviates from a product by {gap:.3e}")
    return rho_s, True


def max_rate(model: BipartiteModel, sg: SplitGenerator | None = None):
    """Largest rate scale: channel rates and the spectral radius of the drift."""
    sg = sg or bipartite_split(model)
    radius = np.max(np.abs(np.linalg.eigvals(sg.D)), initial=0.0)
    return float(max(radius, np.max(model.rates, initial=0.0)))


def default_step(model: BipartiteModel, t_max):
    r = max_rate(model)
    h = t_max / 2000
    if r > 0:
        h = min(h, 1.0 / (20.0 * r))
    return h


@dataclass
class PropagatorTable:
    """Reduced conditional propagator on a uniform grid.

    ``T[k]`` maps ``vec(rho_s)`` to ``vec(Tr_a[exp(t_k D)(rho_s ⊗ rho_a)])`` and
    ``dT[k]`` is its exact time derivative. ``D_local``/``D_smooth`` are filled
    by :func:`extract_memory_kernel`.
    """

    t: np.ndarray
    h: float
    T: np.ndarray
    dT: np.ndarray
    drift: np.ndarray
    embed: np.ndarray
    ptrace: np.ndarray
    dims: tuple
    reset_ancilla: np.ndarray
    D_local: np.ndarray | None = None
    D_smooth: np.ndarray | None = None

    @property
    def d_s(self):
        return self.dims[0]

    @property
    def n_steps(self):
        return self.t.size - 1

    def survival(self, rho):
        return np.real(np.einsum("i,kij,j->k", trace_row(self.d_s), self.T, vec(rho)))


def _step_table(drift, embed, ptrace, h, n):
    E = expm(drift, h)
    M = embed.copy()
    T = np.empty((n + 1, ptrace.shape[0], embed.shape[1]), dtype=complex)
    dT = np.empty_like(T)
    PD = ptrace @ drift
    for k in range(n + 1):
        T[k] = ptrace @ M
        dT[k] = PD @ M
        M = E @ M
    return T, dT


def reduced_propagator(model: BipartiteModel, cert: SymmetryCertificate, t_max, h=None, sg=None):
    """Tabulate ``T(t)`` by repeated application of ``exp(h D)`` on ``[0, t_max]``."""
    h = default_step(model, t_max) if h is None else float(h)
    n = int(math.ceil(t_max / h - 1e-9))
    sg = sg or bipartite_split(model)
    embed = embedding_superop(cert.reset_ancilla, model.d_s)
    ptrace = partial_trace_superop(model.d_s, model.d_a)
    T, dT = _step_table(sg.D, embed, ptrace, h, n)
    return PropagatorTable(
        t=np.arange(n + 1) * h,
        h=h,
        T=T,
        dT=dT,
        drift=sg.D,
        embed=embed,
        ptrace=ptrace,
        dims=model.dims,
        reset_ancilla=cert.reset_ancilla,
    )


def _deconvolve(T, F, K0, h):
    """Forward substitution for ``F_n = h * sum_j' K_j T_{n-j}`` (trapezoid weights)."""
    N = T.shape[0] - 1
    K = np.zeros_like(T)
    K[0] = K0
    for n in range(1, N + 1):
        s = 0.5 * K[0] @ T[n]
        if n > 1:
            s = s + np.tensordot(K[1:n], T[n - 1 : 0 : -1], axes=([0, 2], [0, 1]))
        K[n] = 2.0 * (F[n] / h - s)
    return K


def _smooth121(K):
    S = K.copy()
    S[1:-1] = 0.25 * (K[:-2] + 2.0 * K[1:-1] + K[2:])
    return S


def extract_memory_kernel(table: PropagatorTable, refine=True):
    """Split the memory superoperator into ``D_local δ(t)`` plus a smooth part.

    ``D_local`` is ``T'(0)``. The smooth part solves the first-kind Volterra
    equation ``T'(t) - D_local T(t) = ∫ D_s(t-s) T(s) ds`` by product-trapezoid
    forward substitution. With ``refine`` the alternating error mode of that
    scheme is removed by a [1, 2, 1]/4 filter and the result is Richardson
    extrapolated from steps ``h`` and ``h/2``.

    Returns
    -------
    D_local : ndarray, shape (d_s**2, d_s**2)
    D_smooth : ndarray, shape (n_steps + 1, d_s**2, d_s**2)
    """
    T0 = table.T[0]
    eye = np.eye(T0.shape[0])
    resid = np.max(np.abs(np.linalg.solve(T0, eye) @ T0 - eye))
    if resid > TOL.ill_conditioned or np.max(np.abs(T0 - eye)) > TOL.ill_conditioned:
        raise IllConditioned(f"propagator at t=0 is not the identity (residual {resid:.2e})")
    D0 = table.dT[0]
    PDD = table.ptrace @ table.drift @ table.drift @ table.embed
    K0 = PDD - D0 @ D0
    h, N = table.h, table.n_steps

    if not refine:
        F = table.dT - np.einsum("ij,njk->nik", D0, table.T)
        Ks = _deconvolve(table.T, F, K0, h)
    else:
        # fine table at h/2 with two spare points so the filter reaches the endpoint
        Tf, dTf = _step_table(table.drift, table.embed, table.ptrace, h / 2, 2 * N + 2)
        Ff = dTf - np.einsum("ij,njk->nik", D0, Tf)
        fine = _smooth121(_deconvolve(Tf, Ff, K0, h / 2))[: 2 * N + 1 : 2]
        coarse = _smooth121(_deconvolve(Tf[::2], Ff[::2], K0, h))[: N + 1]
        Ks = (4.0 * fine - coarse) / 3.0
    table.D_local = D0
    table.D_smooth = Ks
    return D0, Ks


def reconvolution_residual(table: PropagatorTable, D_local=None, D_smooth=None, indices=None):
    """Sup norm of ``T' - D_local T - ∫ D_s T`` using Simpson quadrature.

    ``indices`` restricts the check to a subset of grid points (default: about
    100 evenly spaced ones).
    """
    D0 = table.D_local if D_local is None else D_local
    Ks = table.D_smooth if D_smooth is None else D_smooth
    if D0 is None or Ks is None:
        raise ValueError("kernel not extracted")
    N = table.n_steps
    if indices is None:
        indices = np.unique(np.linspace(2, N, min(N - 1, 100)).astype(int))
    worst = 0.0
    for n in indices:
        integrand = np.einsum("kij,kjl->kil", Ks[: n + 1], table.T[n::-1])
        conv = simpson(integrand, dx=table.h, axis=0)
        r = table.dT[n] - D0 @ table.T[n] - conv
        worst = max(worst, float(np.max(np.abs(r))))
    return worst


def nm_interval_statistics(table: PropagatorTable, rho, t_grid=None):
    """Survival, waiting density and conditional rate from the reduced propagator.

    On the table grid the derivative is the exact ``T'(t)``; off-grid times are
    evaluated by exact exponentiation of the drift.
    """
    tr = trace_row(table.d_s)
    v = vec(rho)
    if t_grid is None:
        P0 = np.real(np.einsum("i,kij,j->k", tr, table.T, v))
        w = -np.real(np.einsum("i,kij,j->k", tr, table.dT, v))
    else:
        t_grid = np.asarray(t_grid, dtype=float)
        x = table.embed @ v
        P0 = np.empty(t_grid.size)
        w = np.empty(t_grid.size)
        trb = tr @ table.ptrace
        for k, t in enumerate(t_grid):
            s = expm(table.drift, t) @ x
            P0[k] = np.real(trb @ s)
            w[k] = -np.real(trb @ (table.drift @ s))
    with np.errstate(divide="ignore", invalid="ignore"):
        wc = np.where(P0 > 0, w / P0, np.nan)
    return P0, w, wc


@dataclass
class DecayReport:
    """Monotonicity violations ``(probe, t1, t2, increase)`` of the survival probability."""

    violations: list = field(default_factory=list)
    n_probes: int = 0

    @property
    def ok(self):
        return not self.violations


def check_decaying_survival(table: PropagatorTable, probes=None, n_random=8, seed=0, slack=TOL.monotonic):
    """Report probes whose survival probability increases anywhere on the grid."""
    d = table.d_s
    if probes is None:
        rng = np.random.default_rng(seed)
        probes = [np.diag(np.eye(d)[i]).astype(complex) for i in range(d)]
        probes += [random_density_matrix(d, rng) for _ in range(n_random)]
    report = DecayReport(n_probes=len(probes))
    for i, rho in enumerate(probes):
        P = table.survival(rho)
        running = np.minimum.accumulate(P)
        excess = P[1:] - running[:-1]
        bad = np.nonzero(excess > slack)[0]
        if bad.size:
            k2 = int(bad[0]) + 1
            k1 = int(np.argmin(P[:k2]))
            report.violations.append((i, float(table.t[k1]), float(table.t[k2]), float(excess[bad[0]])))
    return report


def write_table_csv(table: PropagatorTable, path):
    """Write ``t`` followed by every entry of ``T(t)`` as interleaved re/im columns."""
    n = table.T.shape[1]
    header = ["t"]
    for i in range(n):
        for j in range(n):
            header += [f"re_T{i}{j}", f"im_T{i}{j}"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, T in zip(table.t, table.T):
            flat = T.reshape(-1)
            row = np.empty(2 * flat.size)
            row[0::2] = flat.real
            row[1::2] = flat.imag
            w.writerow([repr(float(t))] + [repr(float(x)) for x in row])
