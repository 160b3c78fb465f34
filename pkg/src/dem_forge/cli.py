"""Command line entry point: ``dem-forge <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import assimilate as asm
from .features import read_features, write_features
from .grid import read_grid, write_grid, write_pgm
from .hydrosim import SimParams, read_hydrograph, read_inflow_cells, run
from .morpho import check_connectivity, detect_spikes, morpho_fields
from .pipeline import PipelineConfig, PipelineConfigError, PipelineError, parse_outflow, run_pipeline
from .resample import ResampleParams, refine
from .verify import (
    DEFAULT_SPREAD_TOL,
    compare_masks,
    constraints_to_feature,
    free_surface,
    propose_corrections,
    spread_report,
)

log = logging.getLogger("dem_forge")

EXIT_OK = 0
EXIT_CRITERIA = 1
EXIT_ERROR = 2


def cmd_resample(args) -> int:
    grid = read_grid(args.input)
    params = ResampleParams(args.target_dx, args.n_directions, args.search_radius, args.idw_power)
    out = refine(grid, params)
    write_grid(out, args.out)
    print(f"resampled {grid.n_cols}x{grid.n_rows} -> {out.n_cols}x{out.n_rows} dx={out.dx!r}")
    return EXIT_OK


def cmd_assimilate(args) -> int:
    grid = read_grid(args.input)
    cset = asm.ConstraintSet(conflict_tolerance=args.conflict_tolerance)
    for path in args.features:
        for f in read_features(path):
            cset = cset.merge(
                asm.constraints_from_feature(
                    f, grid, water_surface=args.water_surface, conflict_tolerance=args.conflict_tolerance
                )
            )
    for line in cset.rejected:
        print(f"rejected {line}")
    conflicts = asm.check_constraint_consistency(cset)
    for line in conflicts.lines():
        print(line)
    out = cset.apply(grid, args.precedence)
    print(f"constraints {len(cset)} cells {len(cset.by_cell())} conflicts {len(conflicts)}")
    if args.relax:
        params = asm.SolverParams(args.alpha, args.tol, args.max_iter)
        region = None
        if args.buffer is not None:
            region = asm.buffer_region(grid.shape, cset.by_cell(), args.buffer)
        res = asm.relax(out, cset, params, region=region, precedence=args.precedence)
        out = res.grid
        print(f"relax iterations {res.iterations} residual {res.final_residual:.3e} converged {res.converged}")
    write_grid(out, args.out)
    return EXIT_OK


def cmd_morpho(args) -> int:
    grid = read_grid(args.input)
    m = morpho_fields(grid)
    prefix = str(args.out_prefix)
    for name, field in (("slope", m.slope), ("kt", m.profile_curv), ("ks", m.tangential_curv)):
        write_grid(grid.with_values(field), f"{prefix}_{name}.asc")
        write_pgm(field, f"{prefix}_{name}.pgm")
    print(f"wrote {prefix}_slope/kt/ks (.asc, .pgm)")
    return EXIT_OK


def cmd_spikes(args) -> int:
    spikes = detect_spikes(read_grid(args.input), args.threshold)
    for s in spikes:
        print(f"spike {s.i} {s.j} {s.magnitude:+.6f}")
    print(f"spikes {len(spikes)}")
    return EXIT_OK


def cmd_connectivity(args) -> int:
    grid = read_grid(args.input)
    total = 0
    for f in read_features(args.channel):
        if f.kind != "channel":
            continue
        for b in check_connectivity(grid, f, args.stage):
            print(f"break {b.channel_id} {b.i} {b.j} sill {b.sill_height:.6f}")
            total += 1
    print(f"breaks {total}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    bed = read_grid(args.bed)
    params = SimParams(
        cfl=args.cfl,
        h_dry=args.h_dry,
        manning_n=args.manning_n,
        inflow_cells=tuple(read_inflow_cells(args.inflow)),
        outflow=parse_outflow(args.outflow),
    )
    result = run(bed, params, read_hydrograph(args.hydrograph), args.t_end, args.snap)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(result.snapshots, start=1):
        write_grid(bed.with_values(s.h), out / f"h_{k:04d}.asc")
        write_pgm(s.h, out / f"h_{k:04d}.pgm")
        wet = int(np.count_nonzero(s.h >= params.h_dry))
        print(f"snapshot {k} t {s.t:.3f} wet_cells {wet}")
    print(f"steps {result.steps} mass_balance {result.mass_balance_error:.3e}")
    return EXIT_OK


def cmd_verify(args) -> int:
    dem = read_grid(args.dem)
    spreads = None
    if args.coastlines:
        spreads = spread_report(dem, read_features(args.coastlines))
        for line in spreads.lines():
            print(line)
    comparison = eta = None
    if args.sim_depth and args.observed_mask:
        depth = read_grid(args.sim_depth)
        observed = read_grid(args.observed_mask)
        if depth.shape != dem.shape or observed.shape != dem.shape:
            raise ValueError("dem, depth and observed mask must have the same shape")
        simulated = np.nan_to_num(depth.values) >= args.h_wet
        comparison = compare_masks(simulated, np.nan_to_num(observed.values) > 0.5, dem.valid)
        eta = free_surface(dem, np.nan_to_num(depth.values), args.h_wet)
        print(comparison.line())
    if args.out_constraints:
        fix = propose_corrections(dem, spreads, comparison, eta, h_dry=args.h_dry, spread_tol=args.spread_tol)
        feat = constraints_to_feature(fix, dem)
        write_features([feat] if feat is not None else [], args.out_constraints)
        print(f"corrections {len(fix)}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    config = PipelineConfig.load(args.config)
    if args.describe:
        config.validate()
        for line in config.describe():
            print(line)
        return EXIT_OK
    report = run_pipeline(config, args.workdir)
    print(report.text(), end="")
    return EXIT_OK if report.criteria_met else EXIT_CRITERIA


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dem-forge", description="DEM construction and verification tools")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("resample", help="refine a grid onto a finer spacing")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target-dx", type=float, required=True)
    p.add_argument("--n-directions", type=int, default=16)
    p.add_argument("--search-radius", type=float, default=None)
    p.add_argument("--idw-power", type=float, default=1.0)
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("assimilate", help="pin vector features into a grid, optionally relax")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--water-surface", type=float, default=None,
                   help="water level for depth curves without LEVEL")
    p.add_argument("--conflict-tolerance", type=float, default=asm.DEFAULT_CONFLICT_TOLERANCE)
    p.add_argument("--precedence", choices=("last", "first"), default="last")
    p.add_argument("--relax", action="store_true")
    p.add_argument("--buffer", type=int, default=None, help="relax only this many cells around constraints")
    p.add_argument("--alpha", type=float, default=0.25)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-iter", type=int, default=100000)
    p.set_defaults(func=cmd_assimilate)

    p = sub.add_parser("morpho", help="slope and curvature grids with PGM previews")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_morpho)

    p = sub.add_parser("spikes", help="list nodes far from their neighbourhood median")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--threshold", type=float, required=True)
    p.set_defaults(func=cmd_spikes)

    p = sub.add_parser("connectivity", help="find sills above a stage along channels")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--channel", required=True)
    p.add_argument("--stage", type=float, required=True)
    p.set_defaults(func=cmd_connectivity)

    p = sub.add_parser("simulate", help="run the shallow-water model")
    p.add_argument("--bed", required=True)
    p.add_argument("--hydrograph", required=True)
    p.add_argument("--t-end", type=float, required=True)
    p.add_argument("--snap", type=float, required=True)
    p.add_argument("--inflow", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--cfl", type=float, default=0.4)
    p.add_argument("--h-dry", type=float, default=1e-3)
    p.add_argument("--manning-n", type=float, default=0.03)
    p.add_argument("--outflow", default="", help="e.g. east:open,north:open (default all closed)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="coastline spreads, mask comparison, corrections")
    p.add_argument("--dem", required=True)
    p.add_argument("--sim-depth")
    p.add_argument("--observed-mask")
    p.add_argument("--coastlines")
    p.add_argument("--spread-tol", type=float, default=DEFAULT_SPREAD_TOL)
    p.add_argument("--h-wet", type=float, default=0.01)
    p.add_argument("--h-dry", type=float, default=1e-3)
    p.add_argument("--out-constraints")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("pipeline", help="run a staged construction config")
    p.add_argument("--config", required=True)
    p.add_argument("--workdir", default=".")
    p.add_argument("--describe", action="store_true", help="print the plan and exit")
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (PipelineConfigError, PipelineError, ValueError, OSError, RuntimeError) as exc:
        print(f"dem-forge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
