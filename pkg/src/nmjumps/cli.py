"""Command-line front end: model ingestion, dispatch, CSV outputs and run manifests."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .bipartite import (
    NotFactorizable,
    BipartiteModel,
    certify,
    default_step,
    check_decaying_survival,
    extract_memory_kernel,
    max_rate,
    reconvolution_residual,
    reduced_propagator,
    system_jump_superop,
    write_table_csv,
)
from .liouville import (
    ValidationError,
    dissipator,
    hamiltonian_superop,
    partial_trace_ancilla,
    unvec,
)
from .master import (
    KernelSpec,
    detect_backflow,
    integrate_local_nonlocal,
    integrate_renewal_master,
    relative_entropy_series,
)
from .counting import n_jump_contribution
from .trajectories import NMSampler, default_workers, simulate_ensemble
from . import tls

OUT_ENV = "NMJUMPS_OUT"

_MATRIX = {
    "type": "array",
    "minItems": 1,
    "items": {
        "type": "array",
        "minItems": 1,
        "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
    },
}

MODEL_SCHEMA = {
    "type": "object",
    "required": ["d_s", "d_a", "system_ops", "rates"],
    "additionalProperties": False,
    "properties": {
        "d_s": {"type": "integer", "minimum": 1},
        "d_a": {"type": "integer", "minimum": 1},
        "hamiltonian": _MATRIX,
        "lindblad": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["op", "rate"],
                "additionalProperties": False,
                "properties": {"op": _MATRIX, "rate": {"type": "number", "minimum": 0}},
            },
        },
        "system_ops": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["op"],
                "additionalProperties": False,
                "properties": {"label": {"type": "string"}, "op": _MATRIX},
            },
        },
        "rates": {
            "type": "array",
            "items": {
                "type": "array",
                "items": {"type": "array", "items": {"type": "number", "minimum": 0}},
            },
        },
        "rho0": _MATRIX,
    },
}


class ModelError(ValueError):
    """A model document failed schema or structural validation."""


def _where(path):
    return "/".join(str(p) for p in path) or "<root>"


def parse_matrix(rows, shape, where):
    try:
        arr = np.array(rows, dtype=float)
    except ValueError:
        raise ModelError(f"{where}: rows of unequal length") from None
    if arr.shape != shape + (2,):
        raise ModelError(f"{where}: expected a {shape[0]}x{shape[1]} matrix of [re, im] pairs, got shape {arr.shape[:-1]}")
    return arr[..., 0] + 1j * arr[..., 1]


def model_from_document(doc):
    """Build a :class:`BipartiteModel` (and optional initial state) from a parsed JSON document."""
    errors = sorted(jsonschema.Draft7Validator(MODEL_SCHEMA).iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        raise ModelError(f"schema violation at {_where(e.absolute_path)}: {e.message}")
    d_s, d_a = doc["d_s"], doc["d_a"]
    n = d_s * d_a
    ops = [parse_matrix(o["op"], (d_s, d_s), f"system_ops/{k}/op") for k, o in enumerate(doc["system_ops"])]
    labels = [o.get("label", f"V{k}") for k, o in enumerate(doc["system_ops"])]
    rates = doc["rates"]
    if len(rates) != len(ops):
        raise ModelError(f"rates: expected {len(ops)} blocks (one per system operator), got {len(rates)}")
    for a, block in enumerate(rates):
        if len(block) != d_a or any(len(row) != d_a for row in block):
            raise ModelError(f"rates/{a}: expected a {d_a}x{d_a} block")
    L0 = np.zeros((n * n, n * n), dtype=complex)
    if "hamiltonian" in doc:
        H = parse_matrix(doc["hamiltonian"], (n, n), "hamiltonian")
        try:
            L0 += hamiltonian_superop(H)
        except ValidationError as exc:
            raise ModelError(f"hamiltonian: {exc}") from exc
    for k, ch in enumerate(doc.get("lindblad", [])):
        L0 += ch["rate"] * dissipator(parse_matrix(ch["op"], (n, n), f"lindblad/{k}/op"))
    model = BipartiteModel(d_s, d_a, L0, tuple(ops), np.array(rates, dtype=float), tuple(labels))
    rho0 = parse_matrix(doc["rho0"], (d_s, d_s), "rho0") if "rho0" in doc else None
    return model, rho0


def load_model(source, tls_params=None):
    """Load ``"tls"`` (built-in example) or a JSON model file.

    Returns
    -------
    model : BipartiteModel
    rho0 : ndarray or None
        Initial state stored in the document, if any.
    """
    if source == "tls":
        return tls.build_tls_model(tls_params or tls.TLSParams()), None
    text = Path(source).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return model_from_document(doc)


@dataclass
class RunConfig:
    command: str
    model: str = "tls"
    figure: str | None = None
    out: str = field(default_factory=lambda: os.environ.get(OUT_ENV, "out"))
    seed: int = 0
    traj: int = 2000
    tmax: float = 10.0
    dt: float = 0.01
    h: float | None = None
    workers: int | None = None
    rho0: str | list | None = None
    tls: dict = field(default_factory=dict)

    def validate(self):
        for name in ("traj", "tmax", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.h is not None and not self.h > 0:
            raise ValueError("h must be positive")
        if self.workers is not None and self.workers < 1:
            raise ValueError("workers must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


NAMED_STATES = {
    "y-": tls.y_minus_state,
    "x-": tls.x_minus_state,
    "-": tls.ground_state,
    "+": lambda: tls.projector(tls.PLUS),
}


def _initial_state(cfg, d_s, stored):
    if isinstance(cfg.rho0, str):
        if cfg.rho0 not in NAMED_STATES or d_s != 2:
            raise ValueError(f"unknown initial state {cfg.rho0!r}")
        return NAMED_STATES[cfg.rho0]()
    if cfg.rho0 is not None:
        return parse_matrix(cfg.rho0, (d_s, d_s), "rho0")
    if stored is not None:
        return stored
    if cfg.model == "tls":
        return tls.y_minus_state()
    rho = np.zeros((d_s, d_s), dtype=complex)
    rho[0, 0] = 1.0
    return rho


def write_csv(path, header, rows):
    rows = np.asarray(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) for x in row])


def _matrix_columns(states, prefix):
    d = states.shape[1]
    header, cols = [], []
    for i in range(d):
        for j in range(d):
            header += [f"re_{prefix}{i}{j}", f"im_{prefix}{i}{j}"]
            cols += [states[:, i, j].real, states[:, i, j].imag]
    return header, cols


def reduced_stationary_state(model: BipartiteModel):
    """Partial trace of the null vector of the full bipartite generator."""
    L = model.generator()
    _, _, Vh = np.linalg.svd(L)
    rho = unvec(Vh[-1].conj())
    rho = rho / np.trace(rho)
    return partial_trace_ancilla(rho, model.dims)


class CommandFailed(RuntimeError):
    """An internal validator rejected the run."""


def _stride(cfg, h):
    stride = int(round(cfg.dt / h))
    if stride < 1 or abs(stride * h - cfg.dt) > 1e-9 * cfg.dt:
        raise ValueError("--dt must be an integer multiple of the table step")
    return stride


def _table_step(cfg, model):
    if cfg.h is not None:
        return cfg.h
    # largest divisor of dt not above the default table step
    h0 = default_step(model, cfg.tmax)
    return cfg.dt / max(1, int(np.ceil(cfg.dt / h0 - 1e-9)))


def run(cfg: RunConfig):
    """Execute one command; returns the list of written artifact paths and a report dict."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    params = tls.TLSParams(**cfg.tls) if cfg.model == "tls" else None
    model, stored_rho0 = load_model(cfg.model, params)
    try:
        cert = certify(model)
    except NotFactorizable as exc:
        raise CommandFailed(str(exc)) from exc
    report = {
        "certificate": {
            "kind": cert.kind,
            "gamma_alpha": cert.gamma_alpha.tolist(),
            "c": cert.c.tolist(),
            "d": cert.d.tolist(),
            "residual": cert.residual,
        }
    }
    written = []

    def emit(name, header, rows):
        path = out / f"{name}.csv"
        write_csv(path, header, rows)
        written.append(path)

    cmd = cfg.command
    if cmd == "validate":
        path = out / "certificate.json"
        path.write_text(json.dumps(report["certificate"], indent=2, sort_keys=True) + "\n")
        written.append(path)
    elif cmd == "propagator":
        h = _table_step(cfg, model)
        table = reduced_propagator(model, cert, cfg.tmax, h)
        decay = check_decaying_survival(table)
        D0, Ds = extract_memory_kernel(table)
        resid = reconvolution_residual(table)
        path = out / "propagator.csv"
        write_table_csv(table, path)
        written.append(path)
        n = Ds.shape[1]
        header = ["t"] + [f"{p}_K{i}{j}" for i in range(n) for j in range(n) for p in ("re", "im")]
        flat = Ds.reshape(Ds.shape[0], -1)
        rows = np.empty((flat.shape[0], 1 + 2 * flat.shape[1]))
        rows[:, 0] = table.t
        rows[:, 1::2] = flat.real
        rows[:, 2::2] = flat.imag
        emit("kernel", header, rows)
        report["local_kernel"] = [[[z.real, z.imag] for z in row] for row in D0]
        report["reconvolution_residual"] = resid
        report["survival_violations"] = decay.violations
        if not decay.ok:
            raise CommandFailed(f"survival probability increases: {decay.violations[:3]}")
        if resid > 1e-6 * max(1.0, max_rate(model)) ** 2:
            raise CommandFailed(f"reconvolution residual {resid:.3e} too large")
    elif cmd == "trajectories":
        h = _table_step(cfg, model)
        _stride(cfg, h)
        table = reduced_propagator(model, cert, cfg.tmax, h)
        rho0 = _initial_state(cfg, model.d_s, stored_rho0)
        sampler = NMSampler(model, cert, table)
        series, first = simulate_ensemble(sampler, rho0, cfg.tmax, cfg.traj, cfg.seed, cfg.dt, cfg.workers)
        head, cols = _matrix_columns(first.states, "rho")
        marker = np.zeros(first.t.size)
        for tj in first.jump_times:
            marker[min(first.t.size - 1, int(np.ceil(tj / cfg.dt - 1e-12)))] += 1
        emit("trajectory", ["t"] + head + ["jump"], np.column_stack([first.t] + cols + [marker]))
        hm, cm = _matrix_columns(series.mean, "mean")
        hs, cs = _matrix_columns(series.stderr, "stderr")
        header, cols = ["t"] + hm + hs, [series.t] + cm + cs
        if params is not None and params.gamma_prime == params.gamma and params.gamma > 0:
            ha, ca = _matrix_columns(tls.analytic_solution(params, rho0, series.t), "analytic")
            header, cols = header + ha, cols + ca
        emit("ensemble", header, np.column_stack(cols))
        report["n_traj"] = series.n
        report["truncated"] = series.truncated
    elif cmd == "master":
        h = cfg.h or cfg.dt / 2
        rho0 = _initial_state(cfg, model.d_s, stored_rho0)
        if params is not None and params.gamma_prime == params.gamma and params.gamma > 0:
            spec = tls.closed_form_kernels(params).kernel_spec(h, cfg.tmax)
            rho_inf = tls.stationary_state(params)
        else:
            table = reduced_propagator(model, cert, cfg.tmax, h)
            D0, Ds = extract_memory_kernel(table)
            reset = NMSampler(model, cert, table).reset_system
            spec = KernelSpec(D0, Ds, h, jump_local=system_jump_superop(model, cert), reset=reset)
            rho_inf = reduced_stationary_state(model)
        if cert.kind == "Renewal" and spec.reset is not None:
            sol = integrate_renewal_master(spec, rho0, cfg.tmax)
        else:
            sol = integrate_local_nonlocal(spec, rho0, cfg.tmax)
        stride = _stride(cfg, sol.t[1] - sol.t[0])
        E = relative_entropy_series(sol.states, rho_inf)
        head, cols = _matrix_columns(sol.states[::stride], "rho")
        emit("master", ["t"] + head + ["E"], np.column_stack([sol.t[::stride]] + cols + [E[::stride]]))
        report["backflow"] = detect_backflow(sol.t, E)
    elif cmd == "stats":
        # the expansion is reported on every second table point
        h = cfg.h or _table_step(cfg, model) / 2
        table = reduced_propagator(model, cert, cfg.tmax, h)
        rho0 = _initial_state(cfg, model.d_s, stored_rho0)
        ex = n_jump_contribution(table.T, system_jump_superop(model, cert), rho0, 3, h)
        stride = _stride(cfg, ex.t[1] - ex.t[0])
        emit(
            "counting",
            ["t", "p0", "p1", "p2", "p3", "sum"],
            np.column_stack([ex.t[::stride]] + [p[::stride] for p in ex.p] + [ex.total()[::stride]]),
        )
    elif cmd == "figures":
        if params is None:
            raise ValueError("figures are defined for the built-in tls model only")
        fcfg = {"t_max": cfg.tmax, "dt": cfg.dt, "n_traj": cfg.traj, "seed": cfg.seed, "workers": cfg.workers}
        if cfg.h is not None:
            fcfg["h"] = cfg.h
        data = tls.figure_datasets(params, cfg.figure, fcfg)
        for name, val in data.items():
            if name == "backflow":
                report["backflow"] = val
                path = out / f"{cfg.figure}_backflow.json"
                path.write_text(json.dumps(val, indent=2, sort_keys=True) + "\n")
                written.append(path)
            else:
                emit(name, *val)
    else:
        raise ValueError(f"unknown command {cmd!r}")
    return written, report


def _versions():
    from importlib.metadata import PackageNotFoundError, version

    out = {"nmjumps": __version__, "python": platform.python_version()}
    for dist in ("numpy", "scipy", "joblib", "jsonschema"):
        try:
            out[dist] = version(dist)
        except PackageNotFoundError:
            out[dist] = "unknown"
    return out


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(cfg, written, report, wall):
    path = Path(cfg.out) / f"manifest_{cfg.command}{'_' + cfg.figure if cfg.figure else ''}.json"
    doc = {
        "config": {k: v for k, v in vars(cfg).items()},
        "seed": cfg.seed,
        "versions": _versions(),
        "wall_time_s": wall,
        "checksums": {Path(p).name: _sha256(p) for p in written},
        "report": report,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _common_flags(default):
    # subcommand copies use SUPPRESS so they do not reset flags given before the subcommand
    p = argparse.ArgumentParser(add_help=False, argument_default=default)
    p.add_argument("--config", help="JSON file with run settings (flags override it)")
    p.add_argument("--model", help="model JSON path or 'tls'")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")
    p.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
    p.add_argument("--traj", type=int, help="number of trajectories")
    p.add_argument("--tmax", type=float, help="time horizon")
    p.add_argument("--dt", type=float, help="output grid step")
    p.add_argument("--workers", type=int, help="parallel workers (default: all cores)")
    return p


def build_parser():
    parser = argparse.ArgumentParser(prog="nmjumps", description=__doc__, parents=[_common_flags(None)])
    common = _common_flags(argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("validate", "propagator", "trajectories", "master", "stats"):
        sub.add_parser(name, parents=[common])
    fig = sub.add_parser("figures", parents=[common])
    fig.add_argument("figure", choices=["fig1", "fig2", "fig3"])
    return parser


def config_from_args(args):
    settings = {}
    if args.config:
        settings.update(json.loads(Path(args.config).read_text()))
    for key in ("model", "out", "seed", "traj", "tmax", "dt", "workers"):
        val = getattr(args, key, None)
        if val is not None:
            settings[key] = val
    known = set(RunConfig.__dataclass_fields__) - {"command", "figure"}
    unknown = set(settings) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(command=args.command, figure=getattr(args, "figure", None), **settings)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg = config_from_args(args)
        written, report = run(cfg)
    except (ModelError, ValueError, CommandFailed, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if not isinstance(exc, CommandFailed) else 3
    manifest = write_manifest(cfg, written, report, time.perf_counter() - t0)
    for p in written + [manifest]:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
