"""Two-level system driven through a two-level ancilla: model builder and closed forms.

Basis conventions: system index 0 is the excited state ``|+>`` and index 1 the
ground state ``|->``, so the lowering operator is ``|-><+|``. Ancilla index 0
is the state the ancilla is reset to after every detection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bipartite import BipartiteModel
from .liouville import dissipator, hamiltonian_superop, kron, projector, sandwich, spost, spre
from .master import KernelSpec

SIGMA = np.array([[0, 0], [1, 0]], dtype=complex)
SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)

PLUS = np.array([1, 0], dtype=complex)
MINUS = np.array([0, 1], dtype=complex)
X_MINUS = np.array([1, -1], dtype=complex) / np.sqrt(2)
Y_MINUS = np.array([1, -1j], dtype=complex) / np.sqrt(2)


def ground_state():
    return projector(MINUS)


def y_minus_state():
    return projector(Y_MINUS)


def x_minus_state():
    return projector(X_MINUS)


class UnsupportedRegime(ValueError):
    """Closed forms are only available for equal channel rates."""


@dataclass(frozen=True)
class TLSParams:
    gamma: float = 1.0
    gamma_prime: float = 1.0
    omega: float = 4.0

    def __post_init__(self):
        for name in ("gamma", "gamma_prime", "omega"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    @property
    def nu(self):
        return np.sqrt(complex((self.gamma / 2) ** 2 - self.omega**2))

    @property
    def mu(self):
        return np.sqrt(complex((self.gamma / 4) ** 2 - self.omega**2))

    def require_closed_form(self):
        if self.gamma_prime != self.gamma:
            raise UnsupportedRegime("closed forms require gamma_prime == gamma")
        if self.gamma <= 0:
            raise UnsupportedRegime("closed forms require gamma > 0")


def build_tls_model(params: TLSParams) -> BipartiteModel:
    """Coupling ``(Ω/2) σx ⊗ σx``; detections ``σ ⊗ |1><1|`` (rate γ) and ``σ ⊗ |1><2|`` (rate γ')."""
    H = 0.5 * params.omega * kron(SX, SX)
    rates = np.zeros((1, 2, 2))
    rates[0, 0, 0] = params.gamma
    rates[0, 0, 1] = params.gamma_prime
    return BipartiteModel(2, 2, hamiltonian_superop(H), (SIGMA,), rates, ("sigma",))


def _real(z, what):
    z = np.asarray(z)
    scale = max(1.0, float(np.max(np.abs(z), initial=0.0)))
    if np.max(np.abs(z.imag), initial=0.0) > 1e-12 * scale:
        raise ArithmeticError(f"{what} has a non-negligible imaginary part")
    return z.real


def _coshm1_over(x2, t):
    """``(cosh(x t) - 1) / x²`` for ``x² = x2`` (complex), stable at ``x → 0``."""
    x = np.sqrt(complex(x2))
    if abs(x) < 1e-6:
        xt2 = x2 * t * t
        return t * t * (0.5 + xt2 / 24 + xt2 * xt2 / 720)
    return (np.cosh(x * t) - 1) / x2


def _sinh_over(x2, t):
    """``sinh(x t) / x``, stable at ``x → 0``."""
    x = np.sqrt(complex(x2))
    if abs(x) < 1e-6:
        xt2 = x2 * t * t
        return t * (1 + xt2 / 6 + xt2 * xt2 / 120)
    return np.sinh(x * t) / x


def analytic_survival(params: TLSParams, rho, t):
    """No-detection probability ``Tr[T(t) ρ]``; depends only on the populations of ``ρ``."""
    params.require_closed_form()
    g, W = params.gamma, params.omega
    t = np.asarray(t, dtype=float)
    nu2 = (g / 2) ** 2 - W**2
    tr = np.trace(rho).real
    sz = (rho[0, 0] - rho[1, 1]).real
    val = np.exp(-g * t / 2) * (
        tr * (1 + (g / 2) ** 2 * _coshm1_over(nu2, t)) - sz * (g / 2) * _sinh_over(nu2, t)
    )
    return _real(val, "survival")


@dataclass(frozen=True)
class TLSInitialCoeffs:
    q_c: float
    q_s: float
    a: complex
    b: complex
    p_plus: float
    p_minus: float
    c_plus: complex
    c_minus: complex


def initial_coefficients(params: TLSParams, rho0) -> TLSInitialCoeffs:
    params.require_closed_form()
    g, W = params.gamma, params.omega
    pp, pm = rho0[0, 0].real, rho0[1, 1].real
    cp, cm = complex(rho0[0, 1]), complex(rho0[1, 0])
    r = g**2 / W**2 if W > 0 else np.inf
    q_c = pp * r + (pp - pm)
    q_s = (pp * r + 5 * pp + 3 * pm) / 4
    nu2 = (g / 2) ** 2 - W**2
    a = (cp * g**2 / 2 - (cp + cm) * W**2) / nu2 if nu2 != 0 else complex(np.nan)
    b = (cp - cm) * W**2 / nu2 if nu2 != 0 else complex(np.nan)
    return TLSInitialCoeffs(q_c, q_s, a, b, pp, pm, cp, cm)


def stationary_state(params: TLSParams):
    g, W = params.gamma, params.omega
    p = W**2 / (g**2 + 2 * W**2)
    return np.diag([p, 1 - p]).astype(complex)


def analytic_solution(params: TLSParams, rho0, t):
    """Unconditional reduced state at times ``t``; shape ``t.shape + (2, 2)``."""
    params.require_closed_form()
    g, W = params.gamma, params.omega
    t = np.asarray(t, dtype=float)
    p_inf = W**2 / (g**2 + 2 * W**2)
    pp, pm = rho0[0, 0].real, rho0[1, 1].real
    cp, cm = complex(rho0[0, 1]), complex(rho0[1, 0])
    mu2 = (g / 4) ** 2 - W**2
    nu2 = (g / 2) ** 2 - W**2
    if W > 0:
        co = initial_coefficients(params, rho0)
        cosh_mu = 1 + mu2 * _coshm1_over(mu2, t)
        p = p_inf * (1 + np.exp(-3 * g * t / 4) * (co.q_c * cosh_mu - co.q_s * g * _sinh_over(mu2, t)))
        p = _real(p, "population")
    else:
        p = pp * np.exp(-g * t)
    # c+(t) = e^{-γt/2} [c+ - (c+ - c-) (Ω²/2) (cosh νt - 1)/ν²], equivalent to (a - b cosh νt)/2
    c = np.exp(-g * t / 2) * (cp - (cp - cm) * (W**2 / 2) * _coshm1_over(nu2, t))
    out = np.empty(t.shape + (2, 2), dtype=complex)
    out[..., 0, 0] = p
    out[..., 1, 1] = 1 - p
    out[..., 0, 1] = c
    out[..., 1, 0] = np.conj(c)
    return out


@dataclass(frozen=True)
class TLSKernels:
    """Closed-form memory kernels of the reduced dynamics.

    The population kernels ``k_plus``/``k_minus`` and coherence kernels
    ``k_tilde``/``k_breve`` are the smooth parts; their local weights are
    ``gamma`` and ``gamma/2``. The Pauli-channel functions ``k_x, k_y, k_z``
    give the same smooth superoperator as ``sum_i k_i C[σ_i]``.
    """

    params: TLSParams

    def _e(self, t):
        return np.exp(-self.params.gamma * np.asarray(t, dtype=float) / 2)

    def k_plus(self, t):
        return self.params.omega**2 / 2 * self._e(t)

    k_minus = k_plus

    def k_tilde(self, t):
        return self.params.omega**2 / 4 * (1 + self._e(t) ** 2)

    k_breve = k_tilde

    def k_x(self, t):
        return self.params.omega**2 / 8 * (self._e(t) + 1) ** 2

    def k_z(self, t):
        return self.params.omega**2 / 8 * (self._e(t) - 1) ** 2

    def k_y(self, t):
        return -self.k_z(t)

    @property
    def local_plus(self):
        return self.params.gamma

    @property
    def local_tilde(self):
        return self.params.gamma / 2

    def smooth_superop(self, t):
        t = np.asarray(t, dtype=float)
        Cx, Cy, Cz = dissipator(SX), dissipator(SY), dissipator(SZ)
        return (
            self.k_x(t)[..., None, None] * Cx
            + self.k_y(t)[..., None, None] * Cy
            + self.k_z(t)[..., None, None] * Cz
        )

    def jump_superop(self):
        return self.params.gamma * sandwich(SIGMA)

    def local_superop(self, delta_tilde=1.0):
        """Local part: ``-(γ/2){σ†σ, ·}`` plus ``(1 - δ̃)`` times the reset term.

        ``delta_tilde = 1`` gives the conditional (no-detection) kernel,
        ``delta_tilde = 0`` the unconditional one.
        """
        g = self.params.gamma
        n = SIGMA.conj().T @ SIGMA
        return -0.5 * g * (spre(n) + spost(n)) + (1.0 - delta_tilde) * self.jump_superop()

    def kernel_spec(self, h, t_max):
        """Samples for the local/non-local and renewal master equations."""
        return KernelSpec.from_function(
            self.local_superop(1.0),
            self.smooth_superop,
            h,
            t_max,
            jump_local=self.jump_superop(),
            reset=projector(MINUS),
        )


def closed_form_kernels(params: TLSParams) -> TLSKernels:
    params.require_closed_form()
    return TLSKernels(params)


def kernel_blocks(S):
    """Read population and coherence kernels off superoperator samples ``S[..., 4, 4]``.

    With column stacking the vector order is ``(p+, c-, c+, p-)``. Returns
    ``k_plus`` (loss of ``p+``), ``k_minus`` (gain of ``p+`` from ``p-``),
    ``k_tilde`` (decay of ``c+``) and ``k_breve`` (``c-`` to ``c+`` coupling).
    """
    S = np.asarray(S)
    return {
        "k_plus": -S[..., 0, 0],
        "k_plus_gain": S[..., 3, 0],
        "k_minus": S[..., 0, 3],
        "k_minus_loss": -S[..., 3, 3],
        "k_tilde": -S[..., 2, 2],
        "k_breve": S[..., 2, 1],
    }


def figure_datasets(params: TLSParams, which, config=None):
    """Numerical bundles behind the three figures of the worked example.

    Parameters
    ----------
    which : {"fig1", "fig2", "fig3"}
    config : dict, optional
        ``t_max`` (10/γ), ``dt`` (output step, 0.01/γ), ``h`` (table step,
        ``dt/2``), ``n_traj`` (2000), ``seed`` (0), ``workers``.

    Returns
    -------
    dict
        Maps a file stem to ``(header, rows)``; fig3 also carries a
        ``"backflow"`` entry with the increasing intervals per initial state.
    """
    from .bipartite import certify, nm_interval_statistics, reduced_propagator
    from .master import detect_backflow, integrate_local_nonlocal, relative_entropy_series
    from .trajectories import NMSampler, simulate_ensemble

    cfg = {"t_max": 10.0 / params.gamma, "dt": 0.01 / params.gamma, "n_traj": 2000, "seed": 0, "workers": None}
    cfg.update(config or {})
    cfg.setdefault("h", cfg["dt"] / 2)
    t_max, dt, h = float(cfg["t_max"]), float(cfg["dt"]), float(cfg["h"])
    stride = int(round(dt / h))
    params.require_closed_form()
    model = build_tls_model(params)
    cert = certify(model)
    out = {}
    if which == "fig1":
        table = reduced_propagator(model, cert, t_max, h)
        cols = [table.t[::stride]]
        header = ["t"]
        for name, rho in (("y_minus", y_minus_state()), ("minus", ground_state())):
            P0, w, _ = nm_interval_statistics(table, rho)
            cols += [P0[::stride], w[::stride], analytic_survival(params, rho, table.t[::stride])]
            header += [f"P0_{name}", f"w_{name}", f"P0_{name}_analytic"]
        out["fig1"] = (header, np.column_stack(cols))
    elif which == "fig2":
        table = reduced_propagator(model, cert, t_max, h)
        sampler = NMSampler(model, cert, table)
        rho0 = y_minus_state()
        series, first = simulate_ensemble(
            sampler, rho0, t_max, int(cfg["n_traj"]), int(cfg["seed"]), dt_out=dt, workers=cfg["workers"]
        )
        marker = np.zeros(first.t.size)
        for tj in first.jump_times:
            marker[min(first.t.size - 1, int(np.ceil(tj / dt - 1e-12)))] += 1
        out["fig2_trajectory"] = (
            ["t", "p_plus", "im_coherence", "jump"],
            np.column_stack([first.t, first.states[:, 0, 0].real, first.states[:, 0, 1].imag, marker]),
        )
        exact = analytic_solution(params, rho0, series.t)
        out["fig2_ensemble"] = (
            ["t", "p_plus_mean", "p_plus_stderr", "p_plus_analytic", "im_coh_mean", "im_coh_stderr", "im_coh_analytic"],
            np.column_stack(
                [
                    series.t,
                    series.mean[:, 0, 0].real,
                    series.stderr[:, 0, 0].real,
                    exact[:, 0, 0].real,
                    series.mean[:, 0, 1].imag,
                    series.stderr[:, 0, 1].imag,
                    exact[:, 0, 1].imag,
                ]
            ),
        )
    elif which == "fig3":
        spec = closed_form_kernels(params).kernel_spec(h, t_max)
        rho_inf = stationary_state(params)
        cols, header, backflow = None, ["t"], {}
        for name, rho in (("y_minus", y_minus_state()), ("x_minus", x_minus_state())):
            sol = integrate_local_nonlocal(spec, rho, t_max)
            E = relative_entropy_series(sol.states, rho_inf)
            cols = [sol.t] if cols is None else cols
            cols.append(E)
            header.append(f"E_{name}")
            backflow[name] = detect_backflow(sol.t, E)
        out["fig3"] = (header, np.column_stack(cols))
        out["backflow"] = backflow
    else:
        raise ValueError(f"unknown figure {which!r}")
    return out


def pauli_rates(S):
    """Least-squares coefficients ``(k_x, k_y, k_z)`` of ``S ≈ sum_i k_i C[σ_i]``.

    Returns the three coefficient arrays and the largest entrywise misfit,
    which vanishes when ``S`` is exactly a Pauli channel generator.
    """
    S = np.asarray(S)
    basis = np.stack([dissipator(P).ravel() for P in (SX, SY, SZ)], axis=1)
    flat = S.reshape(-1, 16).T
    coef, *_ = np.linalg.lstsq(basis, flat, rcond=None)
    misfit = float(np.max(np.abs(basis @ coef - flat))) if flat.size else 0.0
    shape = S.shape[:-2]
    return tuple(c.real.reshape(shape) for c in coef) + (misfit,)
