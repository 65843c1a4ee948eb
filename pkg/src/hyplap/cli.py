"""Command-line front end: ``hyplap {solve2d,converge,poincare,solve3d}``.

Exit codes: 0 success, 2 invalid configuration, 3 linear solver did not
converge, 4 projected memory above the cap.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .analysis import (
    STATIONARY_LIVE_VECTORS,
    EOCTable,
    estimate_memory_bytes,
    normalized_relative_error,
    poincare_sweep,
    run_benchmark,
    stationary_3d_error,
    write_nre_csv,
)
from .geometry import benchmark_2d
from .grid import GridSpec, GridVariant, parallel_reduction, write_grid_csv
from .solver import NotConverged, ThetaSchemeConfig

log = logging.getLogger("hyplap")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3
EXIT_MEMORY = 4

COMMANDS = ("solve2d", "converge", "poincare", "solve3d")


class ConfigError(ValueError):
    pass


class MemoryCapExceeded(RuntimeError):
    pass


def _float_list(text) -> list:
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    return [_parse_real(x) for x in str(text).split(",") if x.strip()]


def _int_list(text) -> list:
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    return [int(x) for x in str(text).split(",") if x.strip()]


def _parse_real(text) -> float:
    """Reals may be written as fractions such as ``1/16``."""
    s = str(text).strip()
    if "/" in s:
        num, den = s.split("/", 1)
        return float(num) / float(den)
    return float(s)


def _on_off(text) -> bool:
    s = str(text).strip().lower()
    if s in ("on", "true", "1", "yes"):
        return True
    if s in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"expected on/off, got {text!r}")


def _bool(text) -> bool:
    return text if isinstance(text, bool) else _on_off(text)


# key -> (converter, default)
OPTIONS = {
    "variant": (str, None),
    "h": (_parse_real, 1.0 / 16.0),
    "theta": (_parse_real, 0.5),
    "zeta": (_parse_real, None),
    "gamma": (_parse_real, 1.0 / 6.0),
    "T": (_parse_real, 1.0),
    "h_list": (_float_list, None),
    "m_list": (_int_list, None),
    "n_list": (_int_list, None),
    "out": (str, None),
    "json": (_bool, False),
    "exact_final_time": (_bool, False),
    "tol": (_parse_real, 1e-11),
    "max_iter": (int, None),
    "deterministic": (_on_off, True),
    "sample_at": (str, "xi"),
    "mem_cap_mb": (_parse_real, 8192.0),
    "linear_solver": (str, "pcg-fast"),
}


@dataclass
class RunConfig:
    command: str
    variant: Optional[str] = None
    h: float = 1.0 / 16.0
    theta: float = 0.5
    zeta: Optional[float] = None
    gamma: float = 1.0 / 6.0
    T: float = 1.0
    h_list: Optional[list] = None
    m_list: Optional[list] = None
    n_list: Optional[list] = None
    out: Optional[str] = None
    json: bool = False
    exact_final_time: bool = False
    tol: float = 1e-11
    max_iter: Optional[int] = None
    deterministic: bool = True
    sample_at: str = "xi"
    mem_cap_mb: float = 8192.0
    linear_solver: str = "pcg-fast"
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if not 0.5 <= self.theta <= 1.0:
            raise ConfigError("theta must be in [0.5, 1]")
        for name in ("h", "gamma", "T", "tol", "mem_cap_mb"):
            val = getattr(self, name)
            if not (val > 0 and math.isfinite(val)):
                raise ConfigError(f"{name} must be positive, got {val}")
        if self.zeta is not None and not self.zeta > 0:
            raise ConfigError(f"zeta must be positive, got {self.zeta}")
        if self.max_iter is not None and self.max_iter < 1:
            raise ConfigError("max-iter must be a positive integer")
        if self.h_list is not None:
            if not self.h_list or any(not x > 0 for x in self.h_list):
                raise ConfigError("h-list entries must be positive")
            for a, b in zip(self.h_list, self.h_list[1:]):
                if not math.isclose(a / b, 2.0, rel_tol=1e-9):
                    raise ConfigError("h-list must decrease by factors of 2")
        if self.sample_at not in ("xi", "node"):
            raise ConfigError("sample-at must be 'xi' or 'node'")
        if self.linear_solver not in ("pcg-fast", "cg"):
            raise ConfigError("linear-solver must be 'pcg-fast' or 'cg'")
        if self.variant is not None and self.variant not in ("1", "2"):
            raise ConfigError(f"variant must be 1 or 2, got {self.variant!r}")
        if self.command == "solve3d" and self.variant == "1":
            raise ConfigError("3D supports variant 2 only")

    @property
    def preconditioner(self):
        return "fast" if self.linear_solver == "pcg-fast" else None


def read_run_file(path) -> dict:
    """``key = value`` per line; ``#`` starts a comment; dashes equal underscores."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read run file {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS and key != "command":
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="run file with 'key = value' lines; flags override it")
    common.add_argument("--variant", help="1 (uniform grid) or 2 (tailored grid)")
    common.add_argument("--h", help="grid parameter, e.g. 0.0625 or 1/16")
    common.add_argument("--theta", help="theta in [0.5, 1]")
    common.add_argument("--zeta", help="truncation factor (default 6 in 2D, 2 in 3D)")
    common.add_argument("--gamma", help="truncation exponent (default 1/6)")
    common.add_argument("--T", help="final time (default 1)")
    common.add_argument("--h-list", dest="h_list", help="comma-separated halvings, coarsest first")
    common.add_argument("--m-list", dest="m_list", help="poincare: horizontal sizes m")
    common.add_argument("--n-list", dest="n_list", help="poincare: vertical sizes n")
    common.add_argument("--out", help="output directory")
    common.add_argument("--json", action="store_const", const=True, help="print one JSON summary line")
    common.add_argument("--exact-final-time", dest="exact_final_time", action="store_const", const=True,
                        help="shorten the last step to land on T")
    common.add_argument("--tol", help="relative residual target of the linear solver")
    common.add_argument("--max-iter", dest="max_iter", help="iteration cap of the linear solver")
    common.add_argument("--deterministic", choices=["on", "off"], help="sequential reductions (default on)")
    common.add_argument("--sample-at", dest="sample_at", choices=["xi", "node"],
                        help="sampling points for data and error (default xi)")
    common.add_argument("--mem-cap-mb", dest="mem_cap_mb", help="refuse runs projected above this size")
    common.add_argument("--linear-solver", dest="linear_solver", choices=["pcg-fast", "cg"],
                        help="CG with the fast direct preconditioner, or plain CG")
    common.add_argument("-v", "--verbose", action="store_const", const=True)
    parser = argparse.ArgumentParser(prog="hyplap", description="Heat and Laplace solvers on the hyperbolic half-plane.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve2d", parents=[common], help="run the theta-scheme on the 2D benchmark")
    sub.add_parser("converge", parents=[common], help="convergence study over an h-list")
    sub.add_parser("poincare", parents=[common], help="Poincare constants and minimizer quotients")
    sub.add_parser("solve3d", parents=[common], help="stationary 3D benchmark")
    return parser


def make_config(argv) -> RunConfig:
    ns = vars(build_parser().parse_args(argv))
    command = ns.pop("command")
    verbose = ns.pop("verbose", False)
    raw = {}
    if "config" in ns:
        raw.update(read_run_file(ns.pop("config")))
        raw.pop("command", None)
    raw.update(ns)
    values = {}
    for key, (conv, default) in OPTIONS.items():
        if key in raw and raw[key] is not None:
            try:
                values[key] = conv(raw[key])
            except (TypeError, ValueError) as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"invalid value for {key}: {raw[key]!r}") from None
        else:
            values[key] = default
    cfg = RunConfig(command=command, **values)
    cfg.extra["verbose"] = bool(verbose)
    cfg.extra["given"] = sorted(k for k in raw if raw[k] is not None)
    cfg.validate()
    return cfg


def _out_dir(cfg: RunConfig) -> Optional[Path]:
    if cfg.out is None:
        return None
    path = Path(cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _check_memory(cfg: RunConfig, node_count: int, live_vectors: Optional[int] = None):
    need = estimate_memory_bytes(node_count) if live_vectors is None else estimate_memory_bytes(node_count, live_vectors)
    if need > cfg.mem_cap_mb * 2**20:
        raise MemoryCapExceeded(
            f"projected memory {need / 2**20:.1f} MB exceeds the cap of {cfg.mem_cap_mb:.1f} MB")


def _variants(cfg: RunConfig) -> list:
    if cfg.variant is None:
        return [GridVariant.UNIFORM_2D, GridVariant.TAILORED_2D]
    return [GridVariant.parse(cfg.variant)]


def _zeta2d(cfg):
    return 6.0 if cfg.zeta is None else cfg.zeta


def _emit(cfg: RunConfig, summary: dict, human: str):
    if cfg.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        print(human)


def cmd_solve2d(cfg: RunConfig) -> int:
    variant = GridVariant.parse(cfg.variant or "2")
    zeta = _zeta2d(cfg)
    spec = GridSpec.truncated(variant, cfg.h, zeta=zeta, gamma=cfg.gamma)
    _check_memory(cfg, spec.node_count)
    problem = benchmark_2d()
    U, rep = run_benchmark(variant, cfg.h, cfg.theta, zeta, cfg.gamma, cfg.T, problem=problem,
                           sample_at=cfg.sample_at, exact_final_time=cfg.exact_final_time, tol=cfg.tol,
                           max_iter=cfg.max_iter, preconditioner=cfg.preconditioner)
    # the benchmark maximum sits at (0, 1), inside every truncated domain
    t_final = math.fsum(ThetaSchemeConfig(cfg.theta, cfg.T, exact_final_time=cfg.exact_final_time).schedule(cfg.h))
    nre = normalized_relative_error(U, problem.exact_solution, t_final, peak=problem.peak(t_final),
                                    at=cfg.sample_at)
    summary = dict(rep.to_dict(), command="solve2d", T=cfg.T, final_time=t_final, zeta=zeta, gamma=cfg.gamma,
                   nre_max=float(nre.values.max()), sample_at=cfg.sample_at)
    out = _out_dir(cfg)
    if out is not None:
        write_grid_csv(out / "solution.csv", U.grid, U.values)
        write_nre_csv(out / "nre.csv", nre)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    human = (f"variant {variant.value}  h = {'%.4e' % cfg.h}  theta = {cfg.theta:g}  nodes = {rep.node_count}\n"
             f"l2 error = {'%.4e' % rep.l2_error}  max NRE = {'%.4e' % summary['nre_max']}  "
             f"time = {'%.4e' % rep.wall_time_s} s")
    _emit(cfg, summary, human)
    return EXIT_OK


def cmd_converge(cfg: RunConfig) -> int:
    h_list = cfg.h_list or [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0]
    zeta = _zeta2d(cfg)
    for variant in _variants(cfg):
        _check_memory(cfg, GridSpec.truncated(variant, h_list[-1], zeta=zeta, gamma=cfg.gamma).node_count)
    tables = []
    for variant in _variants(cfg):
        reports = [
            run_benchmark(variant, h, cfg.theta, zeta, cfg.gamma, cfg.T, sample_at=cfg.sample_at,
                          exact_final_time=cfg.exact_final_time, tol=cfg.tol, max_iter=cfg.max_iter,
                          preconditioner=cfg.preconditioner)[1]
            for h in h_list
        ]
        tables.append(EOCTable(reports, {"variant": variant.value, "theta": cfg.theta, "h_list": h_list,
                                         "zeta": zeta, "gamma": cfg.gamma, "T": cfg.T}))
    summary = {"command": "converge", "studies": [t.to_json() for t in tables]}
    out = _out_dir(cfg)
    if out is not None:
        _write_tables_csv(out / "convergence.csv", tables)
        (out / "convergence.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    human = "\n\n".join(f"{t.config['variant']}, theta = {cfg.theta:g}\n{t.format()}" for t in tables)
    _emit(cfg, summary, human)
    return EXIT_OK


def _write_tables_csv(path: Path, tables):
    # one header, rows of every table in order
    parts = []
    for n, t in enumerate(tables):
        tmp = path.with_name(path.name + f".{n}.tmp")
        t.to_csv(tmp)
        lines = tmp.read_text().splitlines(keepends=True)
        tmp.unlink()
        parts.extend(lines if n == 0 else lines[1:])
    path.write_text("".join(parts))


def cmd_poincare(cfg: RunConfig) -> int:
    variant = GridVariant.parse(cfg.variant or "1")
    if variant is GridVariant.UNIFORM_2D:
        ms = cfg.m_list or [10, 100, 1000]
        ns = cfg.n_list or [10, 100, 1000]
        hs = [None]
    else:
        ms = cfg.m_list or [10, 100, 1000]
        ns = cfg.n_list or [200]
        hs = cfg.h_list or ([cfg.h] if "h" in cfg.extra.get("given", ()) else [0.1])
    pairs = [(m, n) for n in ns for m in ms] + [(None, n) for n in ns]
    for m, n in pairs:
        if (m is not None and m < 2) or n < 2:
            raise ConfigError("m and n must be at least 2")
    sweeps = [poincare_sweep(variant, h, pairs) for h in hs]
    summary = {"command": "poincare", "sweeps": sweeps}
    lines = []
    for sw in sweeps:
        head = f"variant {sw['variant']}" + ("" if sw["h"] is None else f"  h = {'%.4e' % sw['h']}")
        lines.append(f"{head}  constant = {'%.6f' % sw['constant']}")
        lines.append(f"{'m':>8} {'n':>8} {'ratio':>12} {'gap':>12}")
        for row in sw["rows"]:
            m = "inf" if row["m"] is None else str(row["m"])
            lines.append(f"{m:>8} {row['n']:>8} {'%.4e' % row['ratio']:>12} {'%.4e' % row['gap']:>12}")
    out = _out_dir(cfg)
    if out is not None:
        (out / "poincare.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default))
    _emit(cfg, summary, "\n".join(lines))
    return EXIT_OK


def _json_default(x):
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    raise TypeError(type(x))


def cmd_solve3d(cfg: RunConfig) -> int:
    h_list = cfg.h_list or [cfg.h]
    zeta = 2.0 if cfg.zeta is None else cfg.zeta
    for h in h_list:
        spec = GridSpec.truncated(GridVariant.TAILORED_3D, h, zeta=zeta, gamma=cfg.gamma)
        _check_memory(cfg, spec.node_count, STATIONARY_LIVE_VECTORS)
    reports = [stationary_3d_error(h, zeta, cfg.gamma, tol=cfg.tol, max_iter=cfg.max_iter,
                                   preconditioner=cfg.preconditioner)[1] for h in h_list]
    table = EOCTable(reports, {"variant": "tailored3d", "h_list": h_list, "zeta": zeta, "gamma": cfg.gamma})
    summary = dict(table.to_json(), command="solve3d")
    out = _out_dir(cfg)
    if out is not None:
        table.to_csv(out / "convergence3d.csv")
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _emit(cfg, summary, "tailored3d stationary\n" + table.format())
    return EXIT_OK


HANDLERS = {"solve2d": cmd_solve2d, "converge": cmd_converge, "poincare": cmd_poincare, "solve3d": cmd_solve3d}


def main(argv=None) -> int:
    try:
        cfg = make_config(sys.argv[1:] if argv is None else argv)
    except ConfigError as exc:
        print(f"hyplap: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if cfg.extra.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx = contextlib.nullcontext() if cfg.deterministic else parallel_reduction(True)
    try:
        with ctx:
            return HANDLERS[cfg.command](cfg)
    except (ConfigError, ValueError) as exc:
        print(f"hyplap: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NotConverged as exc:
        print(f"hyplap: linear solver did not converge: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except MemoryCapExceeded as exc:
        print(f"hyplap: {exc}", file=sys.stderr)
        return EXIT_MEMORY


if __name__ == "__main__":
    sys.exit(main())
