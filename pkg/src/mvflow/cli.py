"""Command line front-end.

Usage::

    mvflow <command> --config run.yaml [--seed S] [--threads K] [--out DIR]

Commands are ``simulate``, ``estimate``, ``density``, ``pde-check`` and
``compare``. The config is YAML (JSON is accepted as a subset) with a strict
schema; unknown keys are rejected. Every CSV starts with
``# config_hash=<hex>`` and is written atomically after all computations
have finished, so a failed run leaves no output behind.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile

import numpy as np
import yaml

from . import estimators as est
from .coefficients import build_model
from .errors import ConfigError, MVFlowError
from .measures import wasserstein2_1d
from .simulator import BrownianDriver, TimeGrid, dump_paths_csv, simulate_particles

COMMANDS = ("simulate", "estimate", "density", "pde-check", "compare")
ESTIMATOR_HEADER = ["estimator", "t", "x", "v", "z", "value", "stderr", "n_samples", "seed", "method"]

_TOP = {"model", "grid", "particles", "samples", "seed", "x", "initial", "chunk",
        "simulate", "estimate", "density", "pde_check", "compare"}
_BLOCKS = {
    "simulate": {"write_paths"},
    "estimate": {"targets", "payoff", "alpha", "v"},
    "density": {"z_grid", "derivatives"},
    "pde_check": {"payoff", "h_t", "fd_eps"},
    "compare": {"target", "payoff", "bumps", "coord", "crn"},
}


# validation helpers


def _keys(block, allowed, where):
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be a mapping")
    extra = sorted(set(block) - set(allowed))
    if extra:
        raise ConfigError(f"unknown keys in {where}: {', '.join(map(str, extra))}")


def _num(val, where, *, positive=False, integer=False):
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{where} must be a number")
    if integer and int(val) != val:
        raise ConfigError(f"{where} must be an integer")
    if not math.isfinite(val):
        raise ConfigError(f"{where} must be finite")
    if positive and not val > 0:
        raise ConfigError(f"{where} must be positive")
    return int(val) if integer else float(val)


def _vector(val, where, n=None):
    vals = val if isinstance(val, list) else [val]
    out = np.array([_num(v, f"{where}[{i}]") for i, v in enumerate(vals)], dtype=float)
    if n is not None and out.size != n:
        raise ConfigError(f"{where} must have {n} entries")
    return out


def _payoff(spec, where):
    if isinstance(spec, str):
        spec = {"name": spec}
    _keys(spec, {"name", "params"}, where)
    if "name" not in spec:
        raise ConfigError(f"{where} needs a name")
    params = spec.get("params", {}) or {}
    if not isinstance(params, dict):
        raise ConfigError(f"{where}.params must be a mapping")
    return est.make_payoff(spec["name"], **params)


def _initial(spec, M, N):
    if spec is None or spec == "point":
        return None
    _keys(spec, {"kind", "mean", "std", "low", "high", "values"}, "initial")
    kind = spec.get("kind")
    if kind == "point":
        return None
    if kind == "normal":
        mean = _vector(spec.get("mean", 0.0), "initial.mean")
        std = _num(spec.get("std", 1.0), "initial.std", positive=True)
        return lambda rng, m: mean + std * rng.standard_normal((m, N))
    if kind == "uniform":
        lo = _num(spec.get("low", 0.0), "initial.low")
        hi = _num(spec.get("high", 1.0), "initial.high")
        if not hi > lo:
            raise ConfigError("initial.high must exceed initial.low")
        return lambda rng, m: rng.uniform(lo, hi, size=(m, N))
    if kind == "points":
        pts = np.array([_vector(p, "initial.values", N) for p in spec.get("values", [])])
        if pts.shape != (M, N):
            raise ConfigError(f"initial.values must list {M} points of dimension {N}")
        return pts
    raise ConfigError(f"unknown initial kind {kind!r}")


class RunConfig:
    """Validated run configuration."""

    def __init__(self, raw, command):
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}")
        _keys(raw, _TOP, "config")
        self.raw = raw
        self.command = command
        m = raw.get("model")
        if m is None:
            raise ConfigError("config needs a model")
        _keys(m, {"family", "params"}, "model")
        params = m.get("params", {}) or {}
        if not isinstance(params, dict):
            raise ConfigError("model.params must be a mapping")
        self.model = build_model(m.get("family"), params)
        g = raw.get("grid", {})
        _keys(g, {"T", "n_steps"}, "grid")
        self.T = _num(g.get("T", 1.0), "grid.T", positive=True)
        self.n_steps = _num(g.get("n_steps", 64), "grid.n_steps", positive=True, integer=True)
        self.M = _num(raw.get("particles", 1000), "particles", positive=True, integer=True)
        if self.M < 2:
            raise ConfigError("particles must be at least 2")
        self.n = _num(raw.get("samples", 10_000), "samples", positive=True, integer=True)
        self.seed = _num(raw.get("seed", 0), "seed", integer=True)
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        N = self.model.dim_state
        self.x = _vector(raw.get("x", [0.0] * N), "x", N)
        self.initial = _initial(raw.get("initial"), self.M, N)
        self.chunk = raw.get("chunk")
        if self.chunk is not None:
            self.chunk = _num(self.chunk, "chunk", positive=True, integer=True)
        key = command.replace("-", "_")
        self.block = raw.get(key, {}) or {}
        _keys(self.block, _BLOCKS[key], key)
        for other in _BLOCKS:
            if other != key and other in raw:
                _keys(raw[other] or {}, _BLOCKS[other], other)

    def plan_kwargs(self, threads):
        kw = dict(n_steps=self.n_steps, M=self.M, n_samples=self.n, seed=self.seed, threads=threads)
        if self.chunk is not None:
            kw["chunk"] = self.chunk
        return kw

    def hash(self):
        text = json.dumps({"command": self.command, "config": self.raw}, sort_keys=True, separators=(",", ":"),
                          default=str)
        return hashlib.sha256(text.encode()).hexdigest()


def load_config(path, command, seed=None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    if seed is not None:
        raw = dict(raw, seed=seed)
    return RunConfig(raw, command)


# output


def _table(header, rows, config_hash):
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([r[h] for h in header] if isinstance(r, dict) else r)
    return buf.getvalue()


def _fmt(v):
    return repr(float(v))


def write_atomic(outputs, out_dir):
    """Write all ``{name: text}`` files, each through a temporary file and rename."""
    os.makedirs(out_dir, exist_ok=True)
    for name, text in outputs.items():
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=out_dir)
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            os.replace(tmp, os.path.join(out_dir, name))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


# commands


def cmd_simulate(cfg: RunConfig, threads=1):
    grid = TimeGrid(cfg.T, cfg.n_steps)
    init = np.broadcast_to(cfg.x, (cfg.M, cfg.model.dim_state)) if cfg.initial is None else cfg.initial
    root = BrownianDriver(cfg.seed, dim=cfg.model.dim_noise)
    paths = simulate_particles(cfg.model, init, cfg.M, grid, root.child("particles"))
    h = cfg.hash()
    N = cfg.model.dim_state
    header = ["step", "t"] + [f"mean_{c}" for c in range(N)] + ["second_moment", "w2_to_previous"]
    rows = []
    for k in range(grid.n_steps + 1):
        mu = paths.measure(k)
        w2 = ""
        if N == 1 and k > 0:
            w2 = _fmt(wasserstein2_1d(paths.measure(k - 1), mu))
        rows.append([k, _fmt(grid.times[k])] + [_fmt(c) for c in mu.mean()] + [_fmt(mu.second_moment()), w2])
    out = {"summary.csv": _table(header, rows, h)}
    if cfg.block.get("write_paths", True):
        buf = io.StringIO()
        dump_paths_csv(paths, buf, header_comment=f"config_hash={h}")
        out["paths.csv"] = buf.getvalue()
    return out


def _alpha(block, N):
    a = block.get("alpha", [0])
    a = a if isinstance(a, list) else [a]
    return tuple(_num(i, "alpha", integer=True) for i in a)


def _v_list(block, N):
    v = block.get("v", "initial")
    if v == "initial":
        return ["initial"]
    if not isinstance(v, list) or not v:
        raise ConfigError("estimate.v must be 'initial' or a list of points")
    return [_vector(p, "estimate.v", N) for p in v]


def cmd_estimate(cfg: RunConfig, threads=1):
    b = cfg.block
    N = cfg.model.dim_state
    targets = b.get("targets", ["expectation"])
    if not isinstance(targets, list) or not targets:
        raise ConfigError("estimate.targets must be a non-empty list")
    for tname in targets:
        if tname not in ("expectation", "dx", "dmu", "fixed_point_dx"):
            raise ConfigError(f"unknown estimate target {tname!r}")
    g = _payoff(b.get("payoff", "identity"), "estimate.payoff")
    alpha = _alpha(b, N)
    v_list = _v_list(b, N) if "dmu" in targets else []
    if "dmu" in targets and v_list == ["initial"] and cfg.initial is None:
        raise ConfigError("dmu with v = 'initial' needs an initial law")
    kw = cfg.plan_kwargs(threads)
    rows = []
    for tname in targets:
        if tname == "expectation":
            res = [est.estimate_expectation(g, cfg.model, cfg.x, cfg.T, initial=cfg.initial, **kw)]
        elif tname == "dx":
            res = [est.estimate_dx(alpha, g, cfg.model, cfg.x, cfg.T, initial=cfg.initial, **kw)]
        elif tname == "dmu":
            res = [est.estimate_dmu(alpha, g, cfg.model, cfg.x, cfg.T, v, initial=cfg.initial, **kw)
                   for v in v_list]
        else:
            res = [est.estimate_dx_fixed_point(alpha, g, cfg.model, cfg.x, cfg.T, **kw)]
        rows.extend(r.row() for r in res)
    return {"estimates.csv": _table(ESTIMATOR_HEADER, rows, cfg.hash())}


def cmd_density(cfg: RunConfig, threads=1):
    b = cfg.block
    zg = b.get("z_grid")
    if zg is None:
        raise ConfigError("density needs z_grid")
    _keys(zg, {"lo", "hi", "count"}, "density.z_grid")
    lo = _num(zg.get("lo"), "z_grid.lo")
    hi = _num(zg.get("hi"), "z_grid.hi")
    count = _num(zg.get("count"), "z_grid.count", positive=True, integer=True)
    if not hi > lo or count < 2:
        raise ConfigError("z_grid needs hi > lo and count >= 2")
    derivs = b.get("derivatives", [])
    if not isinstance(derivs, list):
        raise ConfigError("density.derivatives must be a list")
    z = np.linspace(lo, hi, count)
    if cfg.model.dim_state != 1:
        raise ConfigError("the density command handles one-dimensional models")
    res = est.estimate_density(cfg.model, cfg.x, cfg.T, z, derivatives=derivs, **cfg.plan_kwargs(threads))
    keys = [k for k in ("p", "dp_dz", "dp_dx") if k in res.values]
    header = ["z"] + [c for k in keys for c in (k, f"{k}_stderr")]
    rows = [[_fmt(zk)] + [_fmt(v) for k in keys for v in (res.values[k][i], res.stderr[k][i])]
            for i, zk in enumerate(res.z)]
    h = cfg.hash()
    fit = res.tail_fit
    fit_rows = [[k, _fmt(fit[k])] for k in ("slope", "intercept", "r2")] + [["n_points", fit["n_points"]]]
    return {"density.csv": _table(header, rows, h), "tail_fit.csv": _table(["quantity", "value"], fit_rows, h)}


def cmd_pde_check(cfg: RunConfig, threads=1):
    b = cfg.block
    g = _payoff(b.get("payoff", "centred_mean"), "pde_check.payoff")
    kw = cfg.plan_kwargs(threads)
    if "h_t" in b:
        kw["h_t"] = _num(b["h_t"], "pde_check.h_t", positive=True)
    if "fd_eps" in b:
        kw["fd_eps"] = _num(b["fd_eps"], "pde_check.fd_eps", positive=True)
    r = est.pde_residual(g, cfg.model, cfg.x, cfg.T, initial=cfg.initial, **kw)
    rows = [[name, _fmt(x.estimate), _fmt(x.stderr), x.n_samples]
            for name, x in (("dt_U", r.dt), ("x_terms", r.x_terms), ("mu_terms", r.mu_terms),
                            ("residual", r.residual))]
    rows.append(["h_t", _fmt(r.h_t), "", ""])
    return {"pde_check.csv": _table(["term", "value", "stderr", "n_samples"], rows, cfg.hash())}


def cmd_compare(cfg: RunConfig, threads=1):
    b = cfg.block
    target = b.get("target", "dx")
    g = _payoff(b.get("payoff", "identity"), "compare.payoff")
    bumps = b.get("bumps", [0.1, 0.05, 0.025])
    if not isinstance(bumps, list) or not bumps:
        raise ConfigError("compare.bumps must be a non-empty list")
    bumps = [_num(x, "compare.bumps", positive=True) for x in bumps]
    coord = _num(b.get("coord", 0), "compare.coord", integer=True)
    crn = b.get("crn", True)
    if not isinstance(crn, bool):
        raise ConfigError("compare.crn must be true or false")
    w, rows = est.compare_fd(target, g, cfg.model, cfg.x, cfg.T, bumps, coord=coord, common_random_numbers=crn,
                             initial=cfg.initial, **cfg.plan_kwargs(threads))
    header = ["target", "bump", "fd", "fd_stderr", "weight", "weight_stderr", "z_score"]
    out = [[target] + [_fmt(r[k]) for k in header[1:]] for r in rows]
    return {"compare.csv": _table(header, out, cfg.hash())}


HANDLERS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "density": cmd_density,
            "pde-check": cmd_pde_check, "compare": cmd_compare}


def build_parser():
    p = argparse.ArgumentParser(prog="mvflow", description="Weighted Monte Carlo sensitivities for mean-field SDEs.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="YAML or JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads")
    p.add_argument("--out", default=".", help="output directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("seed must be non-negative")
        if args.threads < 1:
            raise ConfigError("threads must be at least 1")
        cfg = load_config(args.config, args.command, args.seed)
        outputs = HANDLERS[args.command](cfg, threads=args.threads)
        write_atomic(outputs, args.out)
    except MVFlowError as exc:
        return _fail(exc.exit_code, exc)
    except FloatingPointError as exc:
        return _fail(3, exc)
    return 0


def _fail(code, exc):
    msg = " ".join(str(exc).split()).replace(",", ";")
    print(f"error,{code},{msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
