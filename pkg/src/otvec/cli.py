"""Command-line front end: images in, frame sequences and metrics out.

Subcommands
-----------
``solve <config>``
    Read a source/target image pair, build the (augmented) transport
    problem, run the solver, and write density frames, source-layer frames,
    a per-iteration metrics CSV and a key=value summary.
``sweep <config>``
    Same pipeline over a parameter grid (gamma/eta/epsilon/nt); one CSV row
    per grid point, optional per-point frames.
``info <image>``
    Print image dimensions, channel totals and value ranges.

Config files are flat UTF-8 ``key=value`` lines ('#' starts a comment).
Unknown keys are errors.  Flags override config keys one for one.  The
``OTVEC_THREADS`` environment variable sets sweep parallelism;
``--deterministic`` forces serial execution (solves themselves are always
deterministic, so this only pins scheduling).

Exit status: 0 converged, 1 input/config error, 2 solver hit the iteration
cap without converging.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np

from .netpbm import read_netpbm, write_netpbm
from .solver import (
    Problem,
    SolverOptions,
    interpolation_frames,
    scalar_problem,
    solve,
    sweep,
    vector_problem,
)

_METRICS_COLUMNS = ["iteration", "total_energy", "spatial_energy", "edge_energy",
                    "source_energy", "residual", "source_layer_masses"]

_SWEEP_COLUMNS = ["energy", "corrected_energy", "energy_spatial", "energy_edge",
                  "energy_source", "max_source_layer_mass", "mid_source_layer_mass",
                  "source_integral", "iterations", "converged", "error"]


class CliError(Exception):
    """Input-level failure; ``stage`` names the pipeline step that failed."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"error [{stage}]: {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _bool_key(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _float_list(s: str) -> list:
    return [float(tok) for tok in s.split(",") if tok.strip()]


def _int_list(s: str) -> list:
    return [int(tok) for tok in s.split(",") if tok.strip()]


# key -> (parser, default). None defaults are resolved downstream.
_CONFIG_SCHEMA = {
    "source": (str, None),
    "target": (str, None),
    "mask": (str, None),
    "mode": (str, "auto"),            # auto | scalar | vector
    "edges": (str, "complete"),       # complete | "a-b,c-d" pairs
    "gamma": (float, 1.0),
    "eta": (float, 1.0),
    "epsilon": (float, 1e-3),
    "nt": (int, 16),
    "out": (str, "out"),
    "placement": (str, "uniform"),    # uniform | mask
    "edge_density": (str, "two_point"),   # inter-channel rule
    "normalization": (str, "fixed_scale"),  # fixed_scale | per_frame
    "maxval": (int, 255),
    "step": (float, 1.0),
    "relaxation": (float, 1.8),
    "max_iters": (int, 3000),
    "energy_rtol": (float, 1e-5),
    "residual_tol": (float, 1e-7),
    "projection": (str, "spectral"),
    "deterministic": (_bool_key, False),
    "stream_frames": (_bool_key, False),
    # sweep-only keys
    "gamma_grid": (_float_list, None),
    "eta_grid": (_float_list, None),
    "epsilon_grid": (_float_list, None),
    "nt_grid": (_int_list, None),
    "per_point_frames": (_bool_key, False),
}


def parse_config(path: str) -> dict:
    """Read a flat key=value config file; unknown keys are errors."""
    cfg = {key: default for key, (_, default) in _CONFIG_SCHEMA.items()}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError("config", f"cannot read {path}: {exc.strerror or exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError("config", f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_SCHEMA:
            raise CliError("config", f"{path}:{lineno}: unknown key {key!r}")
        parser, _ = _CONFIG_SCHEMA[key]
        try:
            cfg[key] = parser(value)
        except ValueError as exc:
            raise CliError("config", f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return cfg


def _apply_flag_overrides(cfg: dict, args) -> dict:
    mapping = {
        "gamma": args.gamma, "eta": args.eta, "epsilon": args.epsilon,
        "nt": args.nt, "max_iters": args.max_iters, "out": args.out,
        "edge_density": args.edge_density, "placement": args.placement,
        "mask": args.mask,
    }
    for key, val in mapping.items():
        if val is not None:
            cfg[key] = val
    if args.deterministic:
        cfg["deterministic"] = True
    if getattr(args, "stream_frames", False):
        cfg["stream_frames"] = True
    if getattr(args, "per_point_frames", False):
        cfg["per_point_frames"] = True
    return cfg


def _parse_edge_list(spec: str, n_channels: int):
    if spec == "complete":
        return "complete"
    edges = []
    for tok in spec.split(","):
        tok = tok.strip()
        if not tok:
            continue
        parts = tok.split("-")
        if len(parts) != 2:
            raise CliError("config", f"bad edge {tok!r}; want 'a-b'")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise CliError("config", f"bad edge {tok!r}; want integer channels") from None
        if not (0 <= a < n_channels and 0 <= b < n_channels):
            raise CliError("config", f"edge {tok!r} out of range for {n_channels} channels")
        edges.append((a, b))
    if not edges and n_channels > 1:
        raise CliError("config", "empty edge list for a multi-channel problem")
    return edges


# ---------------------------------------------------------------------------
# problem assembly
# ---------------------------------------------------------------------------

def _load_endpoints(cfg: dict):
    if not cfg["source"] or not cfg["target"]:
        raise CliError("config", "both 'source' and 'target' image paths are required")
    try:
        rho0, _ = read_netpbm(cfg["source"])
        rho1, _ = read_netpbm(cfg["target"])
    except (OSError, ValueError) as exc:
        raise CliError("read", str(exc)) from None
    if rho0.shape != rho1.shape:
        raise CliError("read", f"image dimensions differ: source {rho0.shape[1:]} "
                               f"x{rho0.shape[0]}ch vs target {rho1.shape[1:]} "
                               f"x{rho1.shape[0]}ch; resampling is not supported")
    mode = cfg["mode"]
    if mode == "auto":
        mode = "scalar" if rho0.shape[0] == 1 else "vector"
    if mode == "scalar" and rho0.shape[0] != 1:
        raise CliError("read", "mode=scalar needs grayscale (P5) images")
    if mode == "vector" and rho0.shape[0] == 1:
        raise CliError("read", "mode=vector needs color (P6) images")
    if mode not in ("scalar", "vector"):
        raise CliError("config", f"unknown mode {mode!r}")

    mask = None
    if cfg["placement"] == "mask" or cfg["mask"]:
        if not cfg["mask"]:
            raise CliError("config", "placement=mask requires a 'mask' image")
        try:
            planes, _ = read_netpbm(cfg["mask"])
        except (OSError, ValueError) as exc:
            raise CliError("read", f"mask: {exc}") from None
        if planes.shape[0] != 1:
            raise CliError("read", "mask must be a grayscale (P5) image")
        if planes.shape[1:] != rho0.shape[1:]:
            raise CliError("read", f"mask dimensions {planes.shape[1:]} do not match "
                                   f"the endpoint images {rho0.shape[1:]}")
        mask = planes[0]
    return rho0, rho1, mask, mode


def _build_problem(cfg: dict, rho0, rho1, mask, mode: str, **overrides) -> Problem:
    params = {k: cfg[k] for k in ("gamma", "eta", "epsilon", "nt", "placement")}
    params.update(overrides)
    options = SolverOptions(step=cfg["step"], relaxation=cfg["relaxation"],
                            max_iters=int(params.pop("max_iters", cfg["max_iters"])),
                            energy_rtol=cfg["energy_rtol"],
                            residual_tol=cfg["residual_tol"],
                            projection=cfg["projection"])
    try:
        if mode == "scalar":
            params.pop("eta")
            return scalar_problem(rho0[0], rho1[0], int(params.pop("nt")),
                                  mask=mask, options=options, **params)
        edges = _parse_edge_list(cfg["edges"], rho0.shape[0])
        return vector_problem(rho0, rho1, int(params.pop("nt")), edges=edges,
                              mask=mask, base_mode=cfg["edge_density"],
                              options=options, **params)
    except ValueError as exc:
        raise CliError("augment", str(exc)) from None


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

class _FrameSink:
    """Collects rendered frames; writes immediately when streaming."""

    def __init__(self, stream: bool):
        self.stream = stream
        self.pending = []

    def add(self, path: Path, planes, maxval: int):
        if self.stream:
            path.parent.mkdir(parents=True, exist_ok=True)
            write_netpbm(path, planes, maxval)
        else:
            self.pending.append((path, np.array(planes, dtype=np.float64), maxval))

    def flush(self):
        for path, planes, maxval in self.pending:
            path.parent.mkdir(parents=True, exist_ok=True)
            write_netpbm(path, planes, maxval)
        self.pending = []


def _write_frames(outdir: Path, sol, cfg: dict, mode: str) -> None:
    frames = interpolation_frames(sol, neg_rtol=1e-3)
    graph = sol.problem.graph
    layer = graph.source_layer
    original = [c for c in range(frames.shape[1]) if c != layer]
    maxval = cfg["maxval"]
    per_frame = cfg["normalization"] == "per_frame"
    sink = _FrameSink(cfg["stream_frames"])

    global_max = float(frames.max())
    if global_max <= 0.0:
        global_max = 1.0

    def scaled(plane_stack):
        if per_frame:
            m = float(np.max(plane_stack))
            return plane_stack / (m if m > 0.0 else 1.0)
        return plane_stack / global_max

    for k in range(frames.shape[0]):
        for idx, c in enumerate(original):
            sink.add(outdir / "density" / f"channel_{idx}" / f"frame_{k:04d}.pgm",
                     scaled(frames[k, c][None]), maxval)
        if mode == "vector" and len(original) == 3:
            sink.add(outdir / "density" / f"frame_{k:04d}.ppm",
                     scaled(frames[k, original]), maxval)
        if layer is not None:
            sink.add(outdir / "layer" / f"frame_{k:04d}.pgm",
                     scaled(frames[k, layer][None]), maxval)

    if sol.source is not None:
        # net creation rate, all original channels combined; midgray = zero,
        # white = creation, black = destruction
        net = sol.source.sum(axis=1)
        s_max = float(np.abs(net).max())
        if s_max <= 0.0:
            s_max = 1.0
        for k in range(net.shape[0]):
            plane = 0.5 + 0.5 * net[k] / s_max
            sink.add(outdir / "source" / f"frame_{k:04d}.pgm", plane[None], maxval)
    sink.flush()


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return f"{x:.12g}"
    return str(x)


def _write_metrics(outdir: Path, sol) -> None:
    layer_masses = ""
    if sol.problem.graph.source_layer is not None:
        layer_masses = ";".join(f"{m:.12g}" for m in sol.source_layer_masses())
    with open(outdir / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_METRICS_COLUMNS)
        n = len(sol.history_energy)
        for i in range(n):
            spatial, inter, src = sol.history_parts[i]
            writer.writerow([
                i + 1,
                _fmt(float(sol.history_energy[i])),
                _fmt(float(spatial)),
                _fmt(float(inter)),
                _fmt(float(src)),
                _fmt(float(sol.history_residual[i])),
                layer_masses if i == n - 1 else "",
            ])


def _write_summary(outdir: Path, sol, wall_time: float) -> None:
    graph = sol.problem.graph
    inter, src = sol.energy.split_edges(graph)
    spatial = float(sol.energy.spatial_by_channel.sum())
    pairs = [
        ("total_energy", sol.energy.total),
        ("spatial_energy", spatial),
        ("edge_energy", inter),
        ("source_energy", src),
        ("total_mass", sol.problem.total_mass),
        ("iterations", sol.n_iter),
        ("converged", sol.converged),
        ("wall_time", wall_time),
    ]
    if graph.source_layer is not None:
        report = sol.problem.report
        corrected = sol.energy.total - float(sol.energy.spatial_by_channel[graph.source_layer])
        pairs += [
            ("corrected_energy", corrected),
            ("mass_deficit", report.mass_deficit if report else 0.0),
            ("max_source_layer_mass", float(sol.source_layer_masses().max())),
            ("source_integral", float(sol.source.sum() * sol.problem.g.ht)),
        ]
    with open(outdir / "summary.txt", "w", encoding="utf-8") as fh:
        for key, val in pairs:
            fh.write(f"{key}={_fmt(val)}\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_solve(args) -> int:
    cfg = _apply_flag_overrides(parse_config(args.config), args)
    rho0, rho1, mask, mode = _load_endpoints(cfg)
    problem = _build_problem(cfg, rho0, rho1, mask, mode)
    t0 = time.perf_counter()
    try:
        sol = solve(problem)
    except (RuntimeError, ValueError) as exc:
        raise CliError("solve", str(exc)) from None
    wall = time.perf_counter() - t0
    outdir = Path(cfg["out"])
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        _write_frames(outdir, sol, cfg, mode)
        _write_metrics(outdir, sol)
        _write_summary(outdir, sol, wall)
    except (OSError, ValueError) as exc:
        raise CliError("write", str(exc)) from None
    print(f"energy={_fmt(sol.energy.total)} iterations={sol.n_iter} "
          f"converged={_fmt(sol.converged)} out={outdir}")
    return 0 if sol.converged else 2


def cmd_sweep(args) -> int:
    cfg = _apply_flag_overrides(parse_config(args.config), args)
    rho0, rho1, mask, mode = _load_endpoints(cfg)
    grid = {}
    for key in ("gamma", "eta", "epsilon", "nt"):
        values = cfg[f"{key}_grid"]
        if values:
            grid[key] = values
    if not grid:
        grid = {"gamma": [cfg["gamma"]]}
    if mode == "scalar" and "eta" in grid:
        raise CliError("config", "eta_grid applies to vector mode only")

    n_jobs = 1
    if not cfg["deterministic"]:
        try:
            n_jobs = max(1, int(os.environ.get("OTVEC_THREADS", "1")))
        except ValueError:
            raise CliError("config", "OTVEC_THREADS must be an integer") from None

    def make_problem(**params):
        return _build_problem(cfg, rho0, rho1, mask, mode, **params)

    rows = sweep(make_problem, grid, n_jobs=n_jobs)
    outdir = Path(cfg["out"])
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        param_names = sorted(grid)
        with open(outdir / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(param_names + _SWEEP_COLUMNS)
            for row in rows:
                writer.writerow([_fmt(row[p]) for p in param_names]
                                + [_fmt(row[c]) if c in row else "" for c in _SWEEP_COLUMNS])
        if cfg["per_point_frames"]:
            for i, row in enumerate(rows):
                if "solution" in row:
                    _write_frames(outdir / f"point_{i:03d}", row["solution"], cfg, mode)
    except (OSError, ValueError) as exc:
        raise CliError("write", str(exc)) from None

    failures = sum(1 for row in rows if "error" in row)
    for row in rows:
        if "error" in row:
            print(f"point {({p: row[p] for p in param_names})}: {row['error']}",
                  file=sys.stderr)
    print(f"sweep: {len(rows)} points, {failures} failed, out={outdir}")
    return 1 if failures == len(rows) else 0


def cmd_info(args) -> int:
    try:
        planes, maxval = read_netpbm(args.image)
    except (OSError, ValueError) as exc:
        raise CliError("read", str(exc)) from None
    n_ch, ny, nx = planes.shape
    print(f"image={args.image}")
    print(f"size={nx}x{ny} channels={n_ch} maxval={maxval}")
    print(f"total_mass={_fmt(float(planes.sum()))}")
    for c in range(n_ch):
        p = planes[c]
        print(f"channel_{c}: total={_fmt(float(p.sum()))} min={_fmt(float(p.min()))} "
              f"max={_fmt(float(p.max()))}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otvec",
        description="Dynamic mass transport between images, with mass "
                    "creation via a source layer.",
        epilog="metrics.csv columns: " + ", ".join(_METRICS_COLUMNS)
               + ". sweep.csv columns: the swept parameters followed by "
               + ", ".join(_SWEEP_COLUMNS) + ".")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("config", help="flat key=value config file")
        p.add_argument("--gamma", type=float, help="source/inter-channel flux penalty")
        p.add_argument("--eta", type=float, help="source-layer flux penalty (vector mode)")
        p.add_argument("--epsilon", type=float, help="source-layer spatial weight")
        p.add_argument("--nt", type=int, help="number of time slabs")
        p.add_argument("--max-iters", type=int, dest="max_iters")
        p.add_argument("--out", help="output directory")
        p.add_argument("--edge-density", dest="edge_density",
                       choices=["two_point", "primary_endpoint"],
                       help="inter-channel edge density rule")
        p.add_argument("--placement", choices=["uniform", "mask"])
        p.add_argument("--mask", help="mask image (P5) for placement=mask")
        p.add_argument("--deterministic", action="store_true",
                       help="force serial, fixed-order execution")

    p_solve = sub.add_parser("solve", help="solve one transport problem")
    add_common(p_solve)
    p_solve.add_argument("--stream-frames", action="store_true", dest="stream_frames",
                         help="write each frame as soon as it is rendered")
    p_solve.set_defaults(fn=cmd_solve)

    p_sweep = sub.add_parser("sweep", help="solve over a parameter grid")
    add_common(p_sweep)
    p_sweep.add_argument("--per-point-frames", action="store_true",
                         dest="per_point_frames",
                         help="write frame sequences for every grid point")
    p_sweep.set_defaults(fn=cmd_sweep)

    p_info = sub.add_parser("info", help="print image statistics")
    p_info.add_argument("image")
    p_info.set_defaults(fn=cmd_info)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
