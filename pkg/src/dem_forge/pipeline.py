"""
Staged DEM construction driven by a line-oriented config file.

Example::

    base_grid base.asc
    stage burn_channels features=channels.txt
    stage assimilate_points features=soundings.txt
    stage relax buffer=2 tol=1e-5
    stage simulate hydrograph=q.csv inflow=cells.txt t_end=1800 outflow=east:open
    stage verify observed=flood.asc coastlines=coast.txt
    loop max_rounds=2 csi_target=0.9

Paths are relative to the config file. ``#`` starts a comment.

The run keeps a grid and the cumulative constraint set. Assimilation stages
add constraints and write them into the grid; ``relax`` smooths the grid
around the constraints added since the previous relax (or everywhere when no
``buffer`` is given). Every grid version is written to the work directory as
``b0.asc`` (the base), ``b1.asc``, ... together with ``c<k>.txt``, the
constraint state it was made with, so any stage can be re-run from its
persisted input.

When a ``verify`` stage compares against an observed flood mask and a
``loop`` line is present, unmet stop criteria start correction rounds:
propose corrections, write them into the grid, relax around them, simulate,
verify again.
"""

from __future__ import annotations

import logging
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .assimilate import (
    DEFAULT_CONFLICT_TOLERANCE,
    Constraint,
    ConstraintSet,
    SolverParams,
    Source,
    buffer_region,
    check_constraint_consistency,
    constraints_from_feature,
    relax,
)
from .features import read_features
from .grid import ElevationGrid, read_grid, write_grid, write_pgm
from .hydrosim import SIDES, Hydrograph, SimParams, read_hydrograph, read_inflow_cells, run
from .morpho import check_connectivity, detect_spikes
from .resample import ResampleParams, refine
from .verify import (
    DEFAULT_CSI_TARGET,
    DEFAULT_SPREAD_TOL,
    compare_masks,
    free_surface,
    propose_corrections,
    spread_report,
)

log = logging.getLogger(__name__)


class PipelineConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage {stage} failed: {message}")


# key -> (type, required); type "path" means a file resolved against the config dir
_STAGE_KEYS = {
    "resample": {
        "target_dx": (float, True),
        "n_directions": (int, False),
        "search_radius": (float, False),
        "idw_power": (float, False),
    },
    "embed_charts": {"features": ("path", True), "water_surface": (float, False)},
    "burn_channels": {"features": ("path", True)},
    "assimilate_points": {"features": ("path", True)},
    "assimilate_coastlines": {"features": ("path", True)},
    "relax": {
        "alpha": (float, False),
        "tol": (float, False),
        "max_iter": (int, False),
        "buffer": (int, False),
    },
    "morpho_check": {
        "spike_threshold": (float, True),
        "channels": ("path", False),
        "stage_level": (float, False),
    },
    "simulate": {
        "hydrograph": ("path", True),
        "inflow": ("path", True),
        "t_end": (float, True),
        "snapshot": (float, False),
        "cfl": (float, False),
        "h_dry": (float, False),
        "manning_n": (float, False),
        "outflow": (str, False),
        "h_wet": (float, False),
    },
    "verify": {"observed": ("path", False), "coastlines": ("path", False)},
}
STAGE_NAMES = tuple(_STAGE_KEYS)
_LOOP_KEYS = {
    "max_rounds": int,
    "csi_target": float,
    "spread_tol": float,
    "buffer": int,
}
_ACCEPTS = {
    "embed_charts": ("isoline", "depth_curve", "points"),
    "burn_channels": ("channel",),
    "assimilate_points": ("points",),
    "assimilate_coastlines": ("isoline",),
}
GRID_STAGES = ("resample", "embed_charts", "burn_channels", "assimilate_points",
               "assimilate_coastlines", "relax")


@dataclass(frozen=True)
class StageSpec:
    name: str
    params: dict
    line: int

    def describe_params(self, base_dir: Path) -> str:
        parts = []
        for k, v in self.params.items():
            if isinstance(v, Path):
                try:
                    v = v.relative_to(base_dir)
                except ValueError:
                    pass
            parts.append(f"{k}={v}")
        return " ".join(parts)


@dataclass(frozen=True)
class LoopSpec:
    max_rounds: int = 3
    csi_target: float = DEFAULT_CSI_TARGET
    spread_tol: float = DEFAULT_SPREAD_TOL
    buffer: int = 2


@dataclass(frozen=True)
class PipelineConfig:
    base_grid: Path
    stages: tuple
    loop: Optional[LoopSpec] = None
    base_dir: Path = Path(".")

    @classmethod
    def parse(cls, text: str, base_dir=".") -> "PipelineConfig":
        base_dir = Path(base_dir)
        base = None
        stages = []
        loop = None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                words = shlex.split(line)
            except ValueError as exc:
                raise PipelineConfigError(str(exc), lineno) from None
            head, rest = words[0], words[1:]
            if head == "base_grid":
                if len(rest) != 1:
                    raise PipelineConfigError("base_grid takes one path", lineno)
                if base is not None:
                    raise PipelineConfigError("base_grid given twice", lineno)
                base = base_dir / rest[0]
            elif head == "stage":
                if not rest:
                    raise PipelineConfigError("stage needs a name", lineno)
                name = rest[0]
                if name not in _STAGE_KEYS:
                    raise PipelineConfigError(
                        f"unknown stage '{name}' (expected one of {', '.join(STAGE_NAMES)})", lineno
                    )
                stages.append(StageSpec(name, _parse_params(name, rest[1:], lineno, base_dir), lineno))
            elif head == "loop":
                if loop is not None:
                    raise PipelineConfigError("loop given twice", lineno)
                kv = _split_kv(rest, lineno)
                vals = {}
                for k, v in kv.items():
                    if k not in _LOOP_KEYS:
                        raise PipelineConfigError(f"unknown loop key '{k}'", lineno)
                    vals[k] = _convert(_LOOP_KEYS[k], v, k, lineno, base_dir)
                loop = LoopSpec(**vals)
                if loop.max_rounds < 1:
                    raise PipelineConfigError("max_rounds must be >= 1", lineno)
            else:
                raise PipelineConfigError(f"unknown directive '{head}'", lineno)
        if base is None:
            raise PipelineConfigError("missing base_grid line")
        return cls(base, tuple(stages), loop, base_dir)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        return cls.parse(path.read_text(), path.parent)

    def validate(self) -> None:
        missing = []
        if not self.base_grid.is_file():
            missing.append(str(self.base_grid))
        for st in self.stages:
            for v in st.params.values():
                if isinstance(v, Path) and not v.is_file():
                    missing.append(str(v))
        if missing:
            raise PipelineConfigError("missing input files: " + ", ".join(missing))
        seen_sim = False
        for st in self.stages:
            if st.name == "simulate":
                seen_sim = True
            if st.name == "verify" and "observed" in st.params and not seen_sim:
                raise PipelineConfigError("verify with an observed mask needs an earlier simulate stage", st.line)
            if st.name == "morpho_check" and "channels" in st.params and "stage_level" not in st.params:
                raise PipelineConfigError("morpho_check channels= needs stage_level=", st.line)
        if self.loop is not None and not any(s.name == "verify" for s in self.stages):
            raise PipelineConfigError("loop needs a verify stage")

    def describe(self) -> list[str]:
        """One line per stage with its file bindings (plus the loop, if any)."""
        out = []
        version = 0
        for k, st in enumerate(self.stages, start=1):
            src = self.base_grid.name if version == 0 else f"b{version}.asc"
            params = st.describe_params(self.base_dir)
            if st.name in GRID_STAGES:
                version += 1
                out.append(f"{k}. {st.name} {params} : {src} -> b{version}.asc".replace("  ", " "))
            else:
                out.append(f"{k}. {st.name} {params} : reads {src}".replace("  ", " "))
        if self.loop is not None:
            lp = self.loop
            out.append(
                f"loop up to {lp.max_rounds} rounds until csi >= {lp.csi_target} and "
                f"spread <= {lp.spread_tol}: correct, relax (buffer {lp.buffer}), simulate, verify"
            )
        return out


def _split_kv(words, lineno) -> dict:
    kv = {}
    for w in words:
        if "=" not in w:
            raise PipelineConfigError(f"expected key=value, got '{w}'", lineno)
        k, v = w.split("=", 1)
        if k in kv:
            raise PipelineConfigError(f"duplicate key '{k}'", lineno)
        kv[k] = v
    return kv


def _convert(kind, value, key, lineno, base_dir):
    if kind == "path":
        return base_dir / value
    try:
        return kind(value)
    except ValueError:
        raise PipelineConfigError(f"bad value for {key}: '{value}'", lineno) from None


def _parse_params(name, words, lineno, base_dir) -> dict:
    keys = _STAGE_KEYS[name]
    kv = _split_kv(words, lineno)
    out = {}
    for k, v in kv.items():
        if k not in keys:
            raise PipelineConfigError(f"stage {name}: unknown key '{k}'", lineno)
        out[k] = _convert(keys[k][0], v, k, lineno, base_dir)
    for k, (_, required) in keys.items():
        if required and k not in out:
            raise PipelineConfigError(f"stage {name}: missing required key '{k}'", lineno)
    if name == "simulate" and "outflow" in out:
        parse_outflow(out["outflow"], lineno)
    return out


def parse_outflow(text: str, lineno=None) -> dict:
    sides = {s: "closed" for s in SIDES}
    for item in filter(None, text.split(",")):
        side, _, kind = item.partition(":")
        if side not in SIDES or kind not in ("open", "closed"):
            raise PipelineConfigError(f"bad outflow entry '{item}' (use e.g. east:open)", lineno)
        sides[side] = kind
    return sides


# ---------------------------------------------------------------------------
# Run state
# ---------------------------------------------------------------------------


@dataclass
class PipelineState:
    grid: ElevationGrid
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    # cells constrained since the last relax
    pending: set = field(default_factory=set)


def write_state(state: PipelineState, path) -> None:
    """Constraint state as text: ``i j value source bound pending`` per line."""
    lines = [f"conflict_tolerance {state.constraints.conflict_tolerance!r}"]
    for c in state.constraints:
        lines.append(
            f"{c.i} {c.j} {c.value!r} {c.source.value} {int(c.upper_bound)} {int(c.cell in state.pending)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_state(grid: ElevationGrid, path) -> PipelineState:
    lines = Path(path).read_text().splitlines()
    tol = float(lines[0].split()[1])
    cons = []
    pending = set()
    for line in lines[1:]:
        i, j, v, src, bound, pend = line.split()
        c = Constraint(int(i), int(j), float(v), Source(src), upper_bound=bool(int(bound)))
        cons.append(c)
        if int(pend):
            pending.add(c.cell)
    return PipelineState(grid, ConstraintSet(cons, tol), pending)


@dataclass
class SimRecord:
    depth: np.ndarray
    h_dry: float
    h_wet: float


@dataclass
class PipelineReport:
    lines: list = field(default_factory=list)
    csi_history: list = field(default_factory=list)
    misses_history: list = field(default_factory=list)
    max_spread_history: list = field(default_factory=list)
    grids: list = field(default_factory=list)
    criteria_met: bool = True
    rounds: int = 0

    @property
    def initial_csi(self) -> Optional[float]:
        return self.csi_history[0] if self.csi_history else None

    @property
    def final_csi(self) -> Optional[float]:
        return self.csi_history[-1] if self.csi_history else None

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"


def _solver_params(p: dict) -> SolverParams:
    kw = {k: p[k] for k in ("alpha", "tol", "max_iter") if k in p}
    return SolverParams(**kw)


def run_stage(stage: StageSpec, state: PipelineState) -> tuple[PipelineState, list[str]]:
    """Apply one grid-producing stage; returns the new state and report lines."""
    p = stage.params
    grid = state.grid
    if stage.name == "resample":
        rp = ResampleParams(
            target_dx=p["target_dx"],
            **{k: p[k] for k in ("n_directions", "search_radius", "idw_power") if k in p},
        )
        if len(state.constraints):
            raise ValueError("resample must come before any constraints are added")
        out = refine(grid, rp)
        return PipelineState(out), [f"resampled to {out.n_cols}x{out.n_rows} dx={out.dx!r}"]

    if stage.name == "relax":
        params = _solver_params(p)
        region = None
        if "buffer" in p:
            region = buffer_region(grid.shape, state.pending, p["buffer"])
        res = relax(grid, state.constraints, params, region=region)
        lines = [
            f"relax iterations {res.iterations} residual {res.final_residual:.3e} "
            f"converged {res.converged}"
            + (f" region_cells {int(region.sum())}" if region is not None else "")
        ]
        return PipelineState(res.grid, state.constraints, set()), lines

    feats = read_features(p["features"])
    accepted = _ACCEPTS[stage.name]
    new = ConstraintSet(conflict_tolerance=state.constraints.conflict_tolerance)
    for f in feats:
        if f.kind not in accepted:
            raise ValueError(f"feature {f.feature_id} has kind {f.kind}; {stage.name} accepts {accepted}")
        cs = constraints_from_feature(
            f, grid, water_surface=p.get("water_surface"),
            conflict_tolerance=state.constraints.conflict_tolerance,
        )
        new = new.merge(cs)
    merged = state.constraints.merge(new)
    out = merged.apply(grid)
    conflicts = check_constraint_consistency(merged)
    lines = [
        f"constraints added {len(new)} cells {len(new.by_cell())} total {len(merged)} "
        f"conflicts {len(conflicts)} rejected {len(new.rejected)}"
    ]
    return PipelineState(out, merged, state.pending | set(new.by_cell())), lines


class _Runner:
    def __init__(self, config: PipelineConfig, workdir):
        self.cfg = config
        self.work = Path(workdir)
        self.report = PipelineReport()
        self.version = 0
        self.n_sims = 0
        self.sim_stage: Optional[StageSpec] = None
        self.relax_stage: Optional[StageSpec] = None
        self.last_sim: Optional[SimRecord] = None
        self.last_verify = None

    def say(self, line: str) -> None:
        log.info(line)
        self.report.lines.append(line)

    def persist(self, state: PipelineState) -> None:
        name = f"b{self.version}.asc"
        write_grid(state.grid, self.work / name)
        write_state(state, self.work / f"c{self.version}.txt")
        self.report.grids.append(name)
        self.say(f"  wrote {name}")
        self.version += 1

    def simulate(self, stage: StageSpec, grid: ElevationGrid) -> list[str]:
        p = stage.params
        hg: Hydrograph = read_hydrograph(p["hydrograph"])
        cells = read_inflow_cells(p["inflow"])
        sp = SimParams(
            cfl=p.get("cfl", 0.4),
            h_dry=p.get("h_dry", 1e-3),
            manning_n=p.get("manning_n", 0.03),
            inflow_cells=tuple(cells),
            outflow=parse_outflow(p.get("outflow", "")),
        )
        t_end = p["t_end"]
        res = run(grid, sp, hg, t_end, p.get("snapshot", t_end))
        depth = res.final.h
        h_wet = p.get("h_wet", 0.01)
        self.last_sim = SimRecord(depth, sp.h_dry, h_wet)
        self.n_sims += 1
        name = f"depth{self.n_sims}.asc"
        write_grid(grid.with_values(depth), self.work / name)
        write_pgm(depth, self.work / f"depth{self.n_sims}.pgm")
        wet = int(np.count_nonzero(depth >= h_wet))
        return [
            f"simulate steps {res.steps} wet_cells {wet} inflow {res.inflow_volume:.6e} "
            f"mass_balance {res.mass_balance_error:.3e}",
            f"wrote {name}",
        ]

    def verify(self, stage: StageSpec, grid: ElevationGrid) -> list[str]:
        p = stage.params
        lines = []
        spreads = None
        if "coastlines" in p:
            spreads = spread_report(grid, read_features(p["coastlines"]))
            lines += ["  " + ln for ln in spreads.lines()]
            self.report.max_spread_history.append(spreads.max_spread)
        comparison = None
        eta = None
        if "observed" in p:
            if self.last_sim is None:
                raise ValueError("no simulation to verify")
            obs_grid = read_grid(p["observed"])
            if obs_grid.shape != grid.shape:
                raise ValueError(f"observed mask shape {obs_grid.shape} differs from grid {grid.shape}")
            observed = np.nan_to_num(obs_grid.values) > 0.5
            sim = self.last_sim
            simulated = sim.depth >= sim.h_wet
            comparison = compare_masks(simulated, observed, grid.valid)
            eta = free_surface(grid, sim.depth, sim.h_wet)
            self.report.csi_history.append(comparison.csi)
            self.report.misses_history.append(comparison.misses)
            lines.append("  " + comparison.line())
        self.last_verify = (spreads, comparison, eta)
        return lines

    def criteria_met(self) -> bool:
        spreads, comparison, _ = self.last_verify
        lp = self.cfg.loop or LoopSpec()
        ok = True
        if comparison is not None:
            ok &= comparison.csi >= lp.csi_target
        if spreads is not None:
            ok &= spreads.max_spread <= lp.spread_tol
        return bool(ok)

    def run_linear(self, state: PipelineState) -> PipelineState:
        for k, stage in enumerate(self.cfg.stages, start=1):
            self.say(f"stage {k} {stage.name} {stage.describe_params(self.cfg.base_dir)}".rstrip())
            try:
                state = self.execute(stage, state)
            except Exception as exc:
                raise PipelineError(f"{k} {stage.name}", str(exc)) from exc
        return state

    def execute(self, stage: StageSpec, state: PipelineState) -> PipelineState:
        if stage.name in GRID_STAGES:
            state, lines = run_stage(stage, state)
            for ln in lines:
                self.say("  " + ln)
            if stage.name == "relax":
                self.relax_stage = stage
            self.persist(state)
        elif stage.name == "morpho_check":
            p = stage.params
            spikes = detect_spikes(state.grid, p["spike_threshold"])
            self.say(f"  spikes {len(spikes)}")
            for s in spikes:
                self.say(f"    spike {s.i} {s.j} {s.magnitude:+.6f}")
            if "channels" in p:
                for f in read_features(p["channels"]):
                    if f.kind != "channel":
                        continue
                    links = check_connectivity(state.grid, f, p["stage_level"])
                    self.say(f"  channel {f.feature_id} breaks {len(links)}")
                    for b in links:
                        self.say(f"    sill {b.i} {b.j} {b.sill_height:.6f}")
        elif stage.name == "simulate":
            self.sim_stage = stage
            for ln in self.simulate(stage, state.grid):
                self.say("  " + ln)
        elif stage.name == "verify":
            for ln in self.verify(stage, state.grid):
                self.say(ln)
        return state

    def correction_round(self, r: int, state: PipelineState, verify_stage: StageSpec):
        lp = self.cfg.loop
        spreads, comparison, eta = self.last_verify
        h_dry = self.last_sim.h_dry if self.last_sim else 1e-3
        fix = propose_corrections(state.grid, spreads, comparison, eta, h_dry=h_dry,
                                  spread_tol=lp.spread_tol)
        self.say(f"correction {r} constraints {len(fix)} cells {len(fix.by_cell())}")
        if not len(fix):
            return None
        merged = state.constraints.merge(fix)
        cells = set(fix.by_cell())
        state = PipelineState(merged.apply(state.grid), merged, state.pending | cells)
        self.persist(state)

        relax_params = dict(self.relax_stage.params) if self.relax_stage else {}
        relax_params["buffer"] = lp.buffer
        state, lines = run_stage(StageSpec("relax", relax_params, 0), state)
        for ln in lines:
            self.say("  " + ln)
        self.persist(state)
        if self.sim_stage is not None:
            for ln in self.simulate(self.sim_stage, state.grid):
                self.say("  " + ln)
        for ln in self.verify(verify_stage, state.grid):
            self.say(ln)
        return state


def run_pipeline(config: PipelineConfig, workdir) -> PipelineReport:
    """Execute all stages, then correction rounds while the stop criteria fail.

    ``report.rounds`` counts verification rounds: the one from the stage list
    plus one per correction round. ``loop.max_rounds`` caps the corrections.
    """
    config.validate()
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    runner = _Runner(config, work)
    rep = runner.report
    try:
        try:
            base = read_grid(config.base_grid)
        except Exception as exc:
            raise PipelineError("0 base_grid", str(exc)) from exc
        state = PipelineState(base, ConstraintSet(conflict_tolerance=DEFAULT_CONFLICT_TOLERANCE))
        runner.say(f"base {config.base_grid.name} {base.n_cols}x{base.n_rows} dx={base.dx!r}")
        runner.persist(state)
        state = runner.run_linear(state)

        verify_stages = [s for s in config.stages if s.name == "verify"]
        if verify_stages:
            met = runner.criteria_met()
            rep.rounds = 1
            runner.say(f"round 1 criteria_met {met}")
            n_corr = config.loop.max_rounds if config.loop is not None else 0
            for c in range(1, n_corr + 1):
                if met:
                    break
                try:
                    nxt = runner.correction_round(c, state, verify_stages[-1])
                except Exception as exc:
                    raise PipelineError(f"correction {c}", str(exc)) from exc
                if nxt is None:
                    runner.say("no corrections proposed; stopping")
                    break
                state = nxt
                rep.rounds += 1
                met = runner.criteria_met()
                runner.say(f"round {rep.rounds} criteria_met {met}")
            rep.criteria_met = met
        if rep.csi_history:
            runner.say(f"initial_csi {rep.initial_csi:.6f} final_csi {rep.final_csi:.6f}")
        runner.say(f"stop_criteria_met {rep.criteria_met}")
    except PipelineError as exc:
        rep.criteria_met = False
        runner.say(f"ERROR {exc}")
        raise
    finally:
        (work / "report.txt").write_text(rep.text())
    return rep
