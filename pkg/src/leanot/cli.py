"""Command-line harness: instance ingestion, solver selection, run artifacts.

Sub-commands:

  solve        OT/EOT between two histograms (dxg, sinkhorn, or the exact LP)
  barycenter   entropic barycenter of several histograms (dxg-barycenter, ibp)
  downsample   block-mean downsample a PGM image
  gen          synthetic instances (gaussian-mixture, shapes, checkerboard)

Every run writes a manifest (config echo + versions + worker count), an
append-only trajectory CSV with a fixed column set, and a summary JSON.
Non-convergence is a reported outcome (exit 0, converged=false); exit 2 means
bad input, exit 3 an internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .barycenter import dxgb_solve
from .core import DENSE_CAP, CostKernel, ExplicitKernel, GridKernel, Histogram, ingest_image_histogram
from .dxg import DxgParams, Termination, params_li, params_loose, params_tuned, solve as dxg_solve
from .io import (
    block_mean_downsample,
    read_histogram_csv,
    read_pgm,
    write_histogram_csv,
    write_matrix_csv,
    write_pgm,
)
from .oracle import exact_ot
from .sinkhorn import DualPotentials, eot_dual_value, ibp_barycenter, sinkhorn_solve

TRAJECTORY_COLUMNS = ("iter", "seconds", "primal", "dual", "gap", "col_infeas_l1", "s")

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_INTERNAL = 3


class InputError(Exception):
    """User-facing problem with flags or instance files."""


class TrajectoryWriter:
    """Append-only CSV writer with the fixed trajectory schema.

    `clock="fixed"` writes 0 in the seconds column so identical runs produce
    byte-identical files; numeric columns are deterministic either way.
    """

    def __init__(self, path: Path, clock: str = "wall"):
        self.path = path
        self.clock = clock
        self._fh = open(path, "w")
        self._fh.write(",".join(TRAJECTORY_COLUMNS) + "\n")
        self._fh.flush()

    def write(self, it: int, seconds: float, primal: float, dual: float, gap: float,
              infeas: float, s: float) -> None:
        secs = 0.0 if self.clock == "fixed" else seconds
        row = (str(it), f"{secs:.6f}") + tuple(_fmt(v) for v in (primal, dual, gap, infeas, s))
        self._fh.write(",".join(row) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _fmt(v: float) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.12e}"


def _load_histogram(path: str, perturbation: float):
    """Histogram plus grid dims when the source is an image."""
    p = Path(path)
    if not p.exists():
        raise InputError(f"instance file not found: {path}")
    if p.suffix.lower() == ".pgm":
        img = read_pgm(p)
        return ingest_image_histogram(img, perturbation), img.shape
    weights = read_histogram_csv(p)
    if np.any(weights < 0):
        raise InputError(f"{path}: negative histogram entries")
    total = weights.sum()
    if total <= 0:
        raise InputError(f"{path}: histogram has no mass")
    return Histogram(weights / total), None


def _parse_grid(spec: str | None, n: int, image_dims) -> tuple[int, int]:
    if spec:
        try:
            w, h = spec.lower().split("x")
            width, height = int(w), int(h)
        except ValueError:
            raise InputError(f"--grid expects WxH, got {spec!r}")
        if width * height != n:
            raise InputError(f"grid {width}x{height} does not match n={n}")
        return height, width
    if image_dims is not None:
        return image_dims
    side = int(round(math.sqrt(n)))
    if side * side != n:
        raise InputError("n is not a perfect square; pass --grid WxH or --cost")
    return side, side


def _make_kernel(args, n: int, image_dims) -> CostKernel:
    if getattr(args, "cost", None):
        rows = [list(map(float, line.split(","))) for line in Path(args.cost).read_text().splitlines() if line.strip()]
        return ExplicitKernel(np.array(rows))
    p = {"l1": 1, "l2sq": 2, "l3": 3}[args.metric]
    height, width = _parse_grid(args.grid, n, image_dims)
    return GridKernel(height, width, p)


def _build_params(args, n: int, min_marginal: float) -> DxgParams:
    if args.scheme == "tuned":
        params = params_tuned(args.eta if args.eta is not None else 0.0)
    elif args.scheme == "li":
        params = params_li(n, args.eps)
    else:
        params = params_loose(n, args.eps, min_marginal)
    overrides = {}
    if args.scheme != "tuned" and args.eta is not None:
        overrides["eta"] = args.eta
    for name, key in (("eta_mu", "eta_mu"), ("tau_p", "tau_p"), ("tau_mu", "tau_mu"),
                      ("beta", "beta"), ("alpha", "alpha")):
        val = getattr(args, name)
        if val is not None:
            overrides[key] = val
    return params.with_overrides(**overrides) if overrides else params


def _config_dict(args, command: str) -> dict:
    skip = {"func"}
    return {"command": command,
            **{k: v for k, v in sorted(vars(args).items()) if k not in skip}}


def _write_manifest(out: Path, config: dict, workers: int, files: dict) -> None:
    manifest = {
        "config": config,
        "versions": {
            "leanot": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "workers": workers,
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_summary(out: Path, summary: dict) -> None:
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


def cmd_solve(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    r, dims_r = _load_histogram(args.r, args.perturbation)
    c, dims_c = _load_histogram(args.c, args.perturbation)
    if r.n != c.n:
        raise InputError(f"marginal sizes differ: {r.n} vs {c.n}")
    kernel = _make_kernel(args, r.n, dims_r or dims_c)
    if kernel.n != r.n:
        raise InputError("cost kernel size does not match the marginals")

    config = _config_dict(args, "solve")
    files = {"trajectory": "trajectory.csv", "summary": "summary.json"}
    traj = TrajectoryWriter(out / "trajectory.csv", args.clock)
    termination = Termination(eps=args.eps, max_iter=args.max_iter, timeout=args.timeout)
    summary: dict = {"solver": args.solver, "n": r.n, "cost_scale": kernel.scale}
    try:
        if args.solver == "dxg":
            params = _build_params(args, r.n, c.min())
            sol = dxg_solve(kernel, r, c, params, termination, log_stride=args.log_stride,
                            workers=args.workers, dense_cap=args.dense_cap)
            for pt in sol.trajectory:
                traj.write(pt.iter, pt.seconds, pt.primal, pt.dual, pt.gap,
                           pt.col_infeas_l1, pt.s)
            summary.update(_final_summary(sol.converged, sol.iterations, sol.seconds,
                                          sol.final))
            summary["params"] = dataclasses.asdict(params)
            if sol.rounded_plan is not None:
                write_matrix_csv(out / "plan.csv", sol.rounded_plan.entries)
                files["plan"] = "plan.csv"
                summary["rounded_cost_normalized"] = sol.rounded_cost
                summary["rounded_cost"] = sol.rounded_cost * kernel.scale
        elif args.solver == "sinkhorn":
            if args.eta is None or args.eta <= 0:
                raise InputError("sinkhorn requires --eta > 0")
            _run_sinkhorn(kernel, r, c, args, termination, traj, summary, out, files)
        elif args.solver == "exact":
            sol = exact_ot(kernel, r, c)
            summary.update({
                "converged": True,
                "iterations": sol.pivots,
                "value_normalized": sol.value,
                "value": sol.value * kernel.scale,
                "dual_value_normalized": sol.dual_value(r, c),
            })
            write_matrix_csv(out / "plan.csv", sol.plan.entries)
            files["plan"] = "plan.csv"
        else:
            raise InputError(f"unknown solver {args.solver!r}")
    finally:
        traj.close()
    _write_manifest(out, config, args.workers, files)
    _write_summary(out, summary)
    return EXIT_OK


def _final_summary(converged: bool, iterations: int, seconds: float, final) -> dict:
    return {
        "converged": bool(converged),
        "iterations": int(iterations),
        "seconds": float(seconds),
        "final": {
            "primal": final.primal,
            "dual": final.dual,
            "gap": final.gap,
            "col_infeas_l1": final.col_infeas_l1,
            "s": final.s,
        },
    }


def _run_sinkhorn(kernel, r, c, args, termination, traj, summary, out: Path, files: dict):
    """Drive sinkhorn_solve sweep by sweep so the trajectory is written live."""
    eta = args.eta
    t0 = time.perf_counter()
    state = {"last": None}

    def on_sweep(sweep: int, phi, psi, col_gap: float) -> bool:
        timed_out = termination.timeout is not None and time.perf_counter() - t0 > termination.timeout
        if sweep % args.log_stride == 0 or col_gap <= termination.eps / 6.0 or timed_out:
            pot = DualPotentials(phi, psi, eta)
            primal, dual = _eot_values(pot, kernel, r, c, args.workers)
            traj.write(sweep, time.perf_counter() - t0, primal, dual, primal - dual,
                       col_gap, 1.0)
            state["last"] = (sweep, primal, dual, col_gap)
        return timed_out

    pot = sinkhorn_solve(kernel, r, c, eta, tol=termination.eps / 6.0,
                         max_iter=termination.max_iter, workers=args.workers,
                         on_sweep=on_sweep)
    if state["last"] is None or state["last"][0] != pot.sweeps:
        primal, dual = _eot_values(pot, kernel, r, c, args.workers)
        traj.write(pot.sweeps, time.perf_counter() - t0, primal, dual, primal - dual,
                   pot.col_gap, 1.0)
        state["last"] = (pot.sweeps, primal, dual, pot.col_gap)
    sweep, primal, dual, col_gap = state["last"]
    summary.update({
        "converged": bool(pot.converged),
        "iterations": int(pot.sweeps),
        "seconds": time.perf_counter() - t0,
        "final": {"primal": primal, "dual": dual, "gap": primal - dual,
                  "col_infeas_l1": col_gap, "s": 1.0},
        "eta": eta,
    })
    np.save(out / "potentials.npy", np.stack([pot.phi, pot.psi]))
    files["potentials"] = "potentials.npy"


def _eot_values(pot: DualPotentials, kernel, r, c, workers: int):
    """Entropic primal (of the row-feasible plan) and dual value."""
    from .dxg import _plan_stats
    from .dxg import TransportLogWeights

    # The sinkhorn plan after a row update is softmax rows scaled by r with
    # logits (psi - C)/eta, which is exactly an implicit-plan pass.
    state = TransportLogWeights(a=1.0 / pot.eta, b=-pot.psi / pot.eta, s=1.0, t=0)
    cost, col, ent = _plan_stats(state, kernel, r, workers)
    primal = cost - pot.eta * ent
    dual = eot_dual_value(pot, kernel, r, c, workers)
    return primal, dual


# ---------------------------------------------------------------------------
# barycenter
# ---------------------------------------------------------------------------


def cmd_barycenter(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if len(args.marginal) < 1:
        raise InputError("need at least one --marginal file")
    loaded = [_load_histogram(p, args.perturbation) for p in args.marginal]
    marginals = [h for h, _ in loaded]
    dims = next((d for _, d in loaded if d is not None), None)
    n = marginals[0].n
    if any(h.n != n for h in marginals):
        raise InputError("marginal lengths differ")
    kernel = _make_kernel(args, n, dims)

    weights_warning = None
    if args.weights:
        w = np.array([float(x) for x in args.weights.split(",")])
        if w.size != len(marginals) or np.any(w <= 0):
            raise InputError("--weights must list one positive weight per marginal")
        if abs(w.sum() - 1.0) > 1e-9:
            weights_warning = f"weights summed to {w.sum():.6g}; normalized"
            w = w / w.sum()
    else:
        w = np.full(len(marginals), 1.0 / len(marginals))

    eta = args.eta if args.eta is not None else 1e-3
    if eta <= 0:
        raise InputError("barycenter solvers require --eta > 0")
    config = _config_dict(args, "barycenter")
    files = {"trajectory": "trajectory.csv", "summary": "summary.json",
             "barycenter": "barycenter.csv"}
    traj = TrajectoryWriter(out / "trajectory.csv", args.clock)
    termination = Termination(eps=args.eps, max_iter=args.max_iter, timeout=args.timeout)
    summary: dict = {"solver": args.solver, "n": n, "m": len(marginals),
                     "cost_scale": kernel.scale, "eta": eta,
                     "weights": w.tolist()}
    if weights_warning:
        summary["warning"] = weights_warning
        config["weights_normalized"] = w.tolist()
    try:
        if args.solver == "dxg-barycenter":
            params = _build_params(args, n, min(h.min() for h in marginals))
            if params.eta <= 0:
                params = params.with_overrides(eta=eta)
            sol = dxgb_solve(kernel, marginals, w, params, termination,
                             log_stride=args.log_stride, workers=args.workers)
            for pt in sol.trajectory:
                traj.write(pt.iter, pt.seconds, pt.primal, pt.dual, pt.gap,
                           pt.col_infeas_l1, pt.s)
            bary = sol.barycenter
            summary.update(_final_summary(sol.converged, sol.iterations, sol.seconds, sol.final))
            summary["params"] = dataclasses.asdict(params)
            summary["per_marginal_infeas"] = [float(x) for x in sol.per_marginal_infeas]
        elif args.solver == "ibp":
            t0 = time.perf_counter()

            def on_sweep(sweep, gap):
                if sweep % args.log_stride == 0:
                    traj.write(sweep, time.perf_counter() - t0, float("nan"), float("nan"),
                               float("nan"), gap, 1.0)

            res = ibp_barycenter(kernel, marginals, w, eta, tol=termination.eps / 6.0,
                                 max_iter=termination.max_iter, workers=args.workers,
                                 on_sweep=on_sweep)
            traj.write(res.sweeps, time.perf_counter() - t0, float("nan"), float("nan"),
                       float("nan"), res.col_gap, 1.0)
            bary = res.barycenter
            summary.update({"converged": bool(res.converged), "iterations": int(res.sweeps),
                            "seconds": time.perf_counter() - t0,
                            "final": {"col_infeas_l1": res.col_gap}})
        else:
            raise InputError(f"unknown barycenter solver {args.solver!r}")
    finally:
        traj.close()

    write_histogram_csv(out / "barycenter.csv", bary.weights)
    if args.render:
        height, width = _parse_grid(args.grid, n, dims)
        write_pgm(out / "barycenter.pgm", bary.weights.reshape(height, width))
        files["render"] = "barycenter.pgm"
    _write_manifest(out, config, args.workers, files)
    _write_summary(out, summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# downsample / gen
# ---------------------------------------------------------------------------


def cmd_downsample(args) -> int:
    img = read_pgm(args.image)
    try:
        small = block_mean_downsample(img, args.factor)
    except ValueError as exc:
        raise InputError(str(exc))
    write_pgm(args.out, small, maxval=args.maxval, rescale=False)
    return EXIT_OK


def _gaussian_mixture(side: int, rng) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    img = np.zeros((side, side))
    for _ in range(rng.integers(2, 5)):
        cx, cy = rng.uniform(0, side - 1, 2)
        sig = rng.uniform(side / 8.0, side / 3.0)
        img += rng.uniform(0.3, 1.0) * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sig**2))
    return img


def _shape_masks(side: int, rng) -> list[np.ndarray]:
    xs, ys = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    cx, cy = (side - 1) / 2 + rng.uniform(-side / 16, side / 16, 2)
    rad = side / 3.2
    disk = ((xs - cx) ** 2 + (ys - cy) ** 2 <= rad**2).astype(float)
    ring = (np.abs(np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2) - rad) <= side / 10).astype(float)
    half = side / 3.0
    square = ((np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)).astype(float)
    return [disk, ring, square]


def _checkerboard(side: int, block: int, invert: bool) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    board = ((xs // block + ys // block) % 2).astype(float)
    return 1.0 - board if invert else board


def cmd_gen(args) -> int:
    side = int(round(math.sqrt(args.n)))
    if side * side != args.n:
        raise InputError("--n must be a perfect square")
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "gaussian-mixture":
        images = {"r": _gaussian_mixture(side, rng), "c": _gaussian_mixture(side, rng)}
    elif args.kind == "shapes":
        images = {f"shape{k}": m for k, m in enumerate(_shape_masks(side, rng), start=1)}
    elif args.kind == "checkerboard":
        block = max(1, side // 4)
        images = {"a": _checkerboard(side, block, False), "b": _checkerboard(side, block, True)}
    else:
        raise InputError(f"unknown kind {args.kind!r}")
    files = {}
    for name, img in images.items():
        hist = ingest_image_histogram(img, args.perturbation)
        write_histogram_csv(out / f"{name}.csv", hist.weights)
        write_pgm(out / f"{name}.pgm", img)
        files[name] = {"csv": f"{name}.csv", "pgm": f"{name}.pgm"}
    _write_manifest(out, _config_dict(args, "gen"), 1, files)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------


def _add_common_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scheme", choices=("tuned", "li", "loose"), default="tuned")
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--eta-mu", dest="eta_mu", type=float, default=None)
    p.add_argument("--tau-p", dest="tau_p", type=float, default=None)
    p.add_argument("--tau-mu", dest="tau_mu", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--eps", type=float, default=1e-10)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=1_000_000)
    p.add_argument("--timeout", type=float, default=None, help="seconds")
    p.add_argument("--metric", choices=("l1", "l2sq", "l3"), default="l2sq")
    p.add_argument("--grid", default=None, help="WxH grid dims (default: inferred)")
    p.add_argument("--cost", default=None, help="explicit cost matrix CSV")
    p.add_argument("--log-stride", dest="log_stride", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--clock", choices=("wall", "fixed"), default="wall",
                   help="'fixed' zeroes the seconds column for reproducible CSVs")
    p.add_argument("--perturbation", type=float, default=1e-6,
                   help="full-support perturbation applied to image histograms")
    p.add_argument("--dense-cap", dest="dense_cap", type=int, default=DENSE_CAP)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leanot",
                                     description="Linear-memory optimal transport solvers")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="solve an OT/EOT instance")
    p_solve.add_argument("--solver", choices=("dxg", "sinkhorn", "exact"), default="dxg")
    p_solve.add_argument("--r", required=True, help="row marginal (CSV or PGM)")
    p_solve.add_argument("--c", required=True, help="column marginal (CSV or PGM)")
    _add_common_solver_flags(p_solve)
    p_solve.set_defaults(func=cmd_solve)

    p_bary = sub.add_parser("barycenter", help="entropic OT barycenter")
    p_bary.add_argument("--solver", choices=("dxg-barycenter", "ibp"), default="dxg-barycenter")
    p_bary.add_argument("--marginal", action="append", default=[],
                        help="marginal file (repeat per input)")
    p_bary.add_argument("--weights", default=None, help="comma-separated positive weights")
    p_bary.add_argument("--render", action="store_true", help="also write barycenter.pgm")
    _add_common_solver_flags(p_bary)
    p_bary.set_defaults(func=cmd_barycenter)

    p_down = sub.add_parser("downsample", help="block-mean downsample a PGM image")
    p_down.add_argument("image")
    p_down.add_argument("--factor", type=int, required=True)
    p_down.add_argument("--maxval", type=int, default=255)
    p_down.add_argument("--out", required=True)
    p_down.set_defaults(func=cmd_downsample)

    p_gen = sub.add_parser("gen", help="generate synthetic instances")
    p_gen.add_argument("--kind", choices=("gaussian-mixture", "shapes", "checkerboard"),
                       required=True)
    p_gen.add_argument("--n", type=int, required=True, help="histogram size (perfect square)")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--perturbation", type=float, default=1e-6)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_BAD_INPUT if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except Exception as exc:  # anything else is our bug
        import traceback

        traceback.print_exc()
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
