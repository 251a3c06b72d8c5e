"""Run configuration files (JSON) and run output writing.

A configuration has six sections: ``grid``, ``kernel``, ``past_data``, ``run``,
``outputs`` and ``study``. Only ``grid.L``, ``run.eps`` and ``run.t_end`` are
required; every other field has the default listed in :data:`DEFAULTS` (kernel
fields depend on the family, see :data:`KERNEL_DEFAULTS`). Unknown keys are
rejected and every error names the offending key path.
"""
from __future__ import annotations

import copy
import csv
import json
import math
import os
from pathlib import Path

import numpy as np

from . import steady_states as ss
from .delay import PastData, analytic_past, constant_past, expression_past
from .evolve import RunConfig, Trajectory
from .kernel import (QUAD_TOL, TAIL_TOL, HypothesisViolation, KernelSpec, check_hypotheses,
                     make_exponential_kernel, make_power_kernel, make_tabulated_kernel, moments)
from .spatial import ConfigurationError, FieldState, make_grid, read_snapshot, write_snapshot

OUTPUT_ROOT_ENV = "DELAYFLOW_OUTPUT_ROOT"
DIAGNOSTIC_COLUMNS = ("t", "E", "delay_E", "diss_rate", "theta", "mu1_inner", "fp_iters", "contraction")
REQUIRED = object()

KERNEL_DEFAULTS = {
    "exponential": {"b": 1.0, "a_max": None, "tail_tol": TAIL_TOL, "quad_tol": QUAD_TOL},
    "power": {"K": 1.0, "m": 3.0, "c": 1.0, "b": 1.0, "a_max": None, "tail_tol": TAIL_TOL,
              "quad_tol": QUAD_TOL},
    # either an expression rho(s, a) sampled on n_s x n_a nodes up to a_max, or a CSV file
    "tabulated": {"expression": None, "file": None, "n_s": 21, "n_a": 2001, "a_max": 32.0,
                  "tail_tol": TAIL_TOL, "quad_tol": QUAD_TOL},
}

PAST_DEFAULTS = {
    "expression": {"expression": "0.5*sin(pi*s/L)"},
    "steady": {"branch": "w+1", "K": 0.0},
    "file": {"file": REQUIRED},
}

PERTURBATION_DEFAULTS = {"amplitude": 0.0, "modes": 4}

DEFAULTS = {
    "grid": {"L": REQUIRED, "n_cells": 100},
    "run": {"eps": REQUIRED, "t_end": REQUIRED, "dt": None, "fp_tol": 1e-10, "fp_maxit": 300,
            "fp_relax": "auto", "newton_tol": 1e-11, "newton_maxit": 30, "limit_scheme": "newton",
            "detect": True, "stab_tol": 1e-6, "branch_tol": 1e-4, "stab_window": 20, "seed": 0},
    "outputs": {"dir": "out", "every": 1, "snapshot_every": 0},
    "study": {"eps_list": [0.1, 0.05, 0.025, 0.0125], "eps_pairs": None, "t_probe": 0.01,
              "floor": None, "compare_dt": None, "forcing": "g", "j": None},
}


class ConfigParseError(ConfigurationError):
    """Syntax error in a configuration file; carries line and column."""

    def __init__(self, path, line: int, column: int, msg: str):
        super().__init__(f"{path}:{line}:{column}: {msg}")
        self.line, self.column = line, column


# --------------------------------------------------------------------------- validation helpers

def _fill(section: str, given, defaults: dict) -> dict:
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigurationError(f"{section} must be an object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigurationError(f"{section}.{unknown[0]} is not a recognised key "
                                 f"(allowed: {', '.join(sorted(defaults))})")
    out = {}
    for key, dflt in defaults.items():
        if key in given:
            out[key] = given[key]
        elif dflt is REQUIRED:
            raise ConfigurationError(f"{section}.{key} is required")
        else:
            out[key] = copy.deepcopy(dflt)
    return out


def _num(path: str, v, *, positive=False, nonneg=False, integer=False, unit=False, allow_none=False):
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigurationError(f"{path} must be a number, got {v!r}")
    if integer and (not float(v).is_integer()):
        raise ConfigurationError(f"{path} must be an integer, got {v!r}")
    if not math.isfinite(v):
        raise ConfigurationError(f"{path} must be finite")
    if positive and not v > 0:
        raise ConfigurationError(f"{path} must be > 0")
    if nonneg and not v >= 0:
        raise ConfigurationError(f"{path} must be >= 0")
    if unit and not 0 < v < 1:
        raise ConfigurationError(f"{path} must lie in (0, 1)")
    return int(v) if integer else v


def _sym_function(path: str, expr: str, names: tuple, L: float):
    """numpy callable of ``names`` from a formula; pi and L are available."""
    import sympy

    syms = sympy.symbols(" ".join(names), real=True)
    syms = syms if isinstance(syms, tuple) else (syms,)
    try:
        e = sympy.sympify(expr, locals={**{n: s for n, s in zip(names, syms)},
                                        "L": sympy.Float(L), "pi": sympy.pi})
    except (sympy.SympifyError, SyntaxError, TypeError) as exc:
        raise ConfigurationError(f"{path}: cannot parse expression {expr!r}") from exc
    extra = e.free_symbols - set(syms)
    if extra:
        raise ConfigurationError(f"{path}: unknown symbols {sorted(map(str, extra))} in {expr!r}")
    f = sympy.lambdify(syms, e, "numpy")
    return lambda *x: np.broadcast_to(np.asarray(f(*x), dtype=float), np.broadcast(*x).shape)


def _resolve(base: Path, name: str, path: str) -> Path:
    p = Path(name)
    if not p.is_absolute():
        p = base / p
    if not p.is_file():
        raise ConfigurationError(f"{path}: file {name!r} does not exist")
    return p


# --------------------------------------------------------------------------- sections

def _kernel(raw: dict, L: float, base: Path, check: bool) -> KernelSpec:
    kr = raw["kernel"]
    fam = kr.get("family", "exponential")
    if fam not in KERNEL_DEFAULTS:
        raise ConfigurationError(f"kernel.family must be one of {sorted(KERNEL_DEFAULTS)}, got {fam!r}")
    body = {k: v for k, v in kr.items() if k != "family"}
    kr = {"family": fam, **_fill("kernel", body, KERNEL_DEFAULTS[fam])}
    raw["kernel"] = kr
    tail_tol = _num("kernel.tail_tol", kr["tail_tol"], unit=True)
    quad_tol = _num("kernel.quad_tol", kr["quad_tol"], unit=True)
    a_max = _num("kernel.a_max", kr["a_max"], positive=True, allow_none=True)
    try:
        if fam in ("exponential", "power"):
            b = kr["b"]
            if isinstance(b, str):
                b = _sym_function("kernel.b", b, ("s",), L)
            else:
                _num("kernel.b", b, positive=True)
            if fam == "exponential":
                k = make_exponential_kernel(b, L=L, a_max=a_max, tail_tol=tail_tol, quad_tol=quad_tol)
            else:
                k = make_power_kernel(_num("kernel.K", kr["K"]), _num("kernel.m", kr["m"]),
                                      _num("kernel.c", kr["c"]), b, L=L, a_max=a_max,
                                      tail_tol=tail_tol, quad_tol=quad_tol)
        else:
            k = _tabulated(kr, L, base, tail_tol, quad_tol)
    except HypothesisViolation as exc:
        raise ConfigurationError(f"kernel: hypothesis failure: {exc}") from exc
    except ConfigurationError as exc:
        msg = str(exc)
        raise ConfigurationError(msg if msg.startswith("kernel") else f"kernel: {msg}") from exc
    if check:
        rep = check_hypotheses(k)
        if not rep.passed:
            bad = rep.failures()[0]
            raise ConfigurationError(f"kernel: hypothesis failure: {bad.name} ({bad.detail}, value {bad.value:.6g})")
    return k


def _tabulated(kr: dict, L: float, base: Path, tail_tol: float, quad_tol: float) -> KernelSpec:
    expr, fname = kr["expression"], kr["file"]
    if (expr is None) == (fname is None):
        raise ConfigurationError("kernel: tabulated family needs exactly one of kernel.expression, kernel.file")
    if fname is not None:
        p = _resolve(base, fname, "kernel.file")
        # long format: header s,a,rho; rows cover the full (s, a) product grid
        data = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
        if data.shape[1] != 3:
            raise ConfigurationError("kernel.file must have columns s, a, rho")
        s, a = np.unique(data[:, 0]), np.unique(data[:, 1])
        if s.size * a.size != data.shape[0]:
            raise ConfigurationError("kernel.file rows must cover the full (s, a) product grid")
        vals = np.full((s.size, a.size), np.nan)
        vals[np.searchsorted(s, data[:, 0]), np.searchsorted(a, data[:, 1])] = data[:, 2]
        return make_tabulated_kernel(s, a, vals, L=L, tail_tol=tail_tol, quad_tol=quad_tol)
    n_s = _num("kernel.n_s", kr["n_s"], integer=True, positive=True)
    n_a = _num("kernel.n_a", kr["n_a"], integer=True, positive=True)
    a_max = _num("kernel.a_max", kr["a_max"], positive=True)
    rho = _sym_function("kernel.expression", expr, ("s", "a"), L)
    s = np.linspace(0.0, L, n_s)
    a = np.linspace(0.0, a_max, n_a)
    return make_tabulated_kernel(s, a, rho(s[:, None], a[None, :]), L=L, tail_tol=tail_tol,
                                 quad_tol=quad_tol)


def _perturb(past: PastData, pert: dict, L: float, seed: int, grid) -> PastData:
    amp = _num("past_data.perturbation.amplitude", pert["amplitude"], nonneg=True)
    modes = _num("past_data.perturbation.modes", pert["modes"], integer=True, positive=True)
    if amp == 0:
        return past
    coef = amp * np.random.default_rng(seed).standard_normal(modes) / np.arange(1, modes + 1) ** 2
    j = np.arange(1, modes + 1)

    def dz(s):
        return np.cos(np.multiply.outer(s, j) * np.pi / L) @ coef

    def ddz(s):
        return -np.sin(np.multiply.outer(s, j) * np.pi / L) @ (coef * j * np.pi / L)

    f, df = past.func, past.dfunc
    if past.time_dependent:
        return analytic_past(lambda s, t: f(s, t) + dz(s), lambda s, t: df(s, t) + ddz(s),
                             label=f"{past.label}+noise")
    return constant_past(lambda s: f(s, 0.0) + dz(s), lambda s: df(s, 0.0) + ddz(s), grid=grid,
                         label=f"{past.label}+noise")


def _past(raw: dict, L: float, n_cells: int, kernel: KernelSpec, base: Path, seed: int) -> PastData:
    if not isinstance(raw.get("past_data", {}), (dict, type(None))):
        raise ConfigurationError("past_data must be an object")
    pr = dict(raw.get("past_data") or {})
    kind = pr.pop("kind", "expression")
    if kind not in PAST_DEFAULTS:
        raise ConfigurationError(f"past_data.kind must be one of {sorted(PAST_DEFAULTS)}, got {kind!r}")
    pert = pr.pop("perturbation", None)
    pr = {"kind": kind, **_fill("past_data", pr, PAST_DEFAULTS[kind])}
    pr["perturbation"] = _fill("past_data.perturbation", pert, PERTURBATION_DEFAULTS)
    raw["past_data"] = pr
    grid = make_grid(L, n_cells)
    if kind == "expression":
        if not isinstance(pr["expression"], str):
            raise ConfigurationError("past_data.expression must be a string")
        try:
            past = expression_past(pr["expression"], L, grid=grid)
        except ConfigurationError as exc:
            raise ConfigurationError(f"past_data.expression: {exc}") from exc
    elif kind == "steady":
        ids = {b.id: b for b in ss.enumerate_branches(L)}
        if pr["branch"] not in ids:
            raise ConfigurationError(f"past_data.branch must be one of {sorted(ids)} for L = {L}, "
                                     f"got {pr['branch']!r}")
        K = _num("past_data.K", pr["K"])
        mu1 = moments(kernel).mu1
        Z = ss.polish(ss.select_constant(ids[pr["branch"]], mu1, K, grid), mu1, K)
        past = constant_past(Z.values, label=pr["branch"])
    else:
        z = read_snapshot(_resolve(base, pr["file"], "past_data.file"), grid)
        past = constant_past(z, label=str(pr["file"]))
    return _perturb(past, pr["perturbation"], L, seed, grid)


def _study(raw: dict) -> None:
    st = _fill("study", raw.get("study"), DEFAULTS["study"])
    raw["study"] = st
    if not isinstance(st["eps_list"], list) or len(st["eps_list"]) < 1:
        raise ConfigurationError("study.eps_list must be a non-empty list")
    for i, e in enumerate(st["eps_list"]):
        _num(f"study.eps_list[{i}]", e, positive=True)
    if any(b >= a for a, b in zip(st["eps_list"], st["eps_list"][1:])):
        raise ConfigurationError("study.eps_list must be strictly decreasing")
    if st["eps_pairs"] is not None:
        if not isinstance(st["eps_pairs"], list):
            raise ConfigurationError("study.eps_pairs must be a list of [eps, eps'] pairs")
        for i, p in enumerate(st["eps_pairs"]):
            if not (isinstance(p, list) and len(p) == 2):
                raise ConfigurationError(f"study.eps_pairs[{i}] must be a pair")
            for v in p:
                _num(f"study.eps_pairs[{i}]", v, positive=True)
    _num("study.t_probe", st["t_probe"], nonneg=True)
    _num("study.floor", st["floor"], nonneg=True, allow_none=True)
    _num("study.compare_dt", st["compare_dt"], positive=True, allow_none=True)
    if st["forcing"] not in ("g", "f"):
        raise ConfigurationError("study.forcing must be 'g' or 'f'")
    if st["j"] is not None and st["j"] not in (0, 1, 2):
        raise ConfigurationError("study.j must be 0, 1, 2 or null")


# --------------------------------------------------------------------------- public API

def load_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read configuration {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(path, exc.lineno, exc.colno, exc.msg) from exc
    if not isinstance(data, dict):
        raise ConfigParseError(path, 1, 1, "top level must be an object")
    return data


def build_config(data: dict, base=".", seed: int | None = None, check_kernel: bool = True) -> RunConfig:
    """Validate a configuration mapping and build the RunConfig (``raw`` holds the filled mapping)."""
    base = Path(base)
    raw = copy.deepcopy(data)
    unknown = sorted(set(raw) - {"grid", "kernel", "past_data", "run", "outputs", "study"})
    if unknown:
        raise ConfigurationError(f"{unknown[0]} is not a recognised section")
    raw["grid"] = _fill("grid", raw.get("grid"), DEFAULTS["grid"])
    raw["run"] = _fill("run", raw.get("run"), DEFAULTS["run"])
    raw["outputs"] = _fill("outputs", raw.get("outputs"), DEFAULTS["outputs"])
    if raw.get("kernel") is None:
        raw["kernel"] = {}
    if not isinstance(raw["kernel"], dict):
        raise ConfigurationError("kernel must be an object")
    L = _num("grid.L", raw["grid"]["L"], positive=True)
    n_cells = _num("grid.n_cells", raw["grid"]["n_cells"], integer=True, positive=True)
    if n_cells < 4:
        raise ConfigurationError("grid.n_cells must be >= 4")
    run, out = raw["run"], raw["outputs"]
    if seed is not None:
        run["seed"] = int(seed)
    eps = _num("run.eps", run["eps"], nonneg=True)
    t_end = _num("run.t_end", run["t_end"], nonneg=True)
    dt = _num("run.dt", run["dt"], positive=True, allow_none=True)
    fp_tol = _num("run.fp_tol", run["fp_tol"], unit=True)
    newton_tol = _num("run.newton_tol", run["newton_tol"], unit=True)
    fp_maxit = _num("run.fp_maxit", run["fp_maxit"], integer=True, positive=True)
    newton_maxit = _num("run.newton_maxit", run["newton_maxit"], integer=True, positive=True)
    relax = run["fp_relax"]
    if relax != "auto":
        _num("run.fp_relax", relax, positive=True)
        if relax > 1:
            raise ConfigurationError("run.fp_relax must be 'auto' or lie in (0, 1]")
    if run["limit_scheme"] not in ("newton", "semi-implicit"):
        raise ConfigurationError("run.limit_scheme must be 'newton' or 'semi-implicit'")
    if not isinstance(run["detect"], bool):
        raise ConfigurationError("run.detect must be true or false")
    stab_tol = _num("run.stab_tol", run["stab_tol"], positive=True)
    branch_tol = _num("run.branch_tol", run["branch_tol"], positive=True)
    window = _num("run.stab_window", run["stab_window"], integer=True, positive=True)
    seed_v = _num("run.seed", run["seed"], integer=True, nonneg=True)
    every = _num("outputs.every", out["every"], integer=True, positive=True)
    snap = _num("outputs.snapshot_every", out["snapshot_every"], integer=True, nonneg=True)
    if not isinstance(out["dir"], str) or not out["dir"]:
        raise ConfigurationError("outputs.dir must be a non-empty string")
    _study(raw)
    kernel = _kernel(raw, L, base, check_kernel)
    past = _past(raw, L, n_cells, kernel, base, seed_v)
    return RunConfig(L=L, n_cells=n_cells, kernel=kernel, past=past, eps=eps, t_end=t_end, dt=dt,
                     fp_tol=fp_tol, fp_maxit=fp_maxit, fp_relax=relax, newton_tol=newton_tol,
                     newton_maxit=newton_maxit, limit_scheme=run["limit_scheme"], output_every=every,
                     snapshot_every=snap, detect=run["detect"], stab_tol=stab_tol, branch_tol=branch_tol,
                     stab_window=window, seed=seed_v, raw=raw)


def parse_config(path, seed: int | None = None, check_kernel: bool = True) -> RunConfig:
    """Read, validate and fill a JSON configuration; relative file names resolve against its folder."""
    path = Path(path)
    return build_config(load_json(path), base=path.parent, seed=seed, check_kernel=check_kernel)


def default_config(L: float = 2.0, eps: float = 0.05, t_end: float = 1.0) -> dict:
    """A complete configuration mapping holding every default."""
    raw = copy.deepcopy(DEFAULTS)
    raw["grid"]["L"] = L
    raw["run"].update(eps=eps, t_end=t_end)
    raw["kernel"] = {"family": "exponential", **copy.deepcopy(KERNEL_DEFAULTS["exponential"])}
    raw["past_data"] = {"kind": "expression", **PAST_DEFAULTS["expression"],
                        "perturbation": dict(PERTURBATION_DEFAULTS)}
    return raw


def write_config(raw: dict, path) -> None:
    Path(path).write_text(json.dumps(raw, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- outputs

def output_dir(cfg: RunConfig, override=None) -> Path:
    """outputs.dir, placed under $DELAYFLOW_OUTPUT_ROOT when it is relative."""
    d = Path(override if override is not None else cfg.raw.get("outputs", {}).get("dir", "out"))
    if not d.is_absolute():
        d = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / d
    return d


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return f"{float(v):.17g}"


def json_safe(obj):
    # JSON without NaN/inf tokens
    if isinstance(obj, dict):
        return {str(k): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return json_safe(obj.tolist())
    return obj


def write_csv(path, rows: list, columns) -> None:
    """CSV with the given columns; ``path`` may also be an open text stream."""
    if hasattr(path, "write"):
        _csv_rows(path, rows, columns)
        return
    with open(path, "w", newline="") as fh:
        _csv_rows(fh, rows, columns)


def _csv_rows(fh, rows, columns) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) if isinstance(r[c], (int, float, np.number)) else r[c] for c in columns])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(json_safe(obj), indent=2, sort_keys=True) + "\n")


def write_outputs(traj: Trajectory, series=None, paths=None, config: RunConfig | None = None) -> dict:
    """Write diagnostics.csv, snapshot_XXXXX.csv files and summary.json into ``paths``.

    ``series`` defaults to ``traj.series``. A trajectory that ended in a solver
    failure is written as well, with ``partial: true`` in the summary.
    Returns the summary mapping.
    """
    if paths is None:
        raise ConfigurationError("write_outputs needs an output directory")
    out = Path(paths)
    out.mkdir(parents=True, exist_ok=True)
    rows = traj.series if series is None else series
    write_csv(out / "diagnostics.csv", rows, DIAGNOSTIC_COLUMNS)
    snaps = []
    for i, (t, z) in enumerate(traj.snapshots):
        name = f"snapshot_{i:05d}.csv"
        write_snapshot(out / name, z)
        snaps.append({"file": name, "t": t})
    matched = traj.matched
    failed = traj.status not in ("ReachedTEnd", "Stabilized")
    summary = {
        "status": traj.status,
        "partial": failed,
        "failure": traj.failure or None,
        "matched_branch": None if matched is None else matched.branch.id,
        "matched_constant": None if matched is None else matched.c,
        "kappa": traj.kappa,
        "jump": traj.jump,
        "eps": traj.eps,
        "t_final": traj.times[-1] if traj.times else None,
        "n_outputs": len(traj.times),
        "snapshots": snaps,
        "config": None if config is None else config.raw,
    }
    write_json(out / "summary.json", summary)
    return summary
