"""Experiment definitions, cell execution and result files."""
import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml

from config import get_config
from errors import CalibrationError, ConfigError, SimulationError, UnknownTierError
from policies import POLICIES
from sim_engine import (ComparisonRow, EpochMetrics, RunSummary, SimConfig, Simulation, average_runs,
                        compare_matrix)
from tier_model import (GIB, PAGE_SIZE, TIERS, Anchor, Calibration, TierId, TierPerformanceModel,
                        calibration_from_dict, calibration_to_dict, load_calibration)
from workload import (RegionSpec, Workload, WorkloadSpec, load_profiles, load_trace, npb_profile,
                      scale_demand, workload_from_dict)

logger = logging.getLogger(__name__)

EXPERIMENT_SCHEMA_VERSION = 1
KINDS = ("matrix", "ratio_sweep")

SUMMARY_HEADER = ("cell,workload,policy,seed,epochs,throughput_mbps,steady_throughput_mbps,mean_latency_ns,"
                  "energy_per_access_nj,migrated_pages,fast_traffic_share,violations")
REGION_HEADER = "cell,workload,policy,seed,region,latency_ns,bandwidth_mbps"
SWEEP_HEADER = "demand_mbps,ratio,throughput_mbps,mean_latency_ns,best,gain"
MEASUREMENT_HEADER = ["tier", "read_fraction", "demand_mbps", "latency_ns", "bandwidth_mbps"]


@dataclass
class Cell:
    index: int
    workload_index: int
    workload: str
    policy: str
    params: Dict[str, Any]
    seed: int

    @property
    def cell_id(self) -> str:
        return f"{self.index:03d}-{self.workload}-{self.policy}-s{self.seed}"


@dataclass
class ExperimentDef:
    name: str
    kind: str = "matrix"
    description: str = ""
    horizon: int = 1000
    epoch_length: float = 0.01
    page_scale: int = 1
    capacity_bytes: Dict[TierId, int] = field(default_factory=dict)
    calibration_path: Optional[str] = None
    seeds: List[int] = field(default_factory=lambda: [0])
    baseline: str = "admdefault"
    steady_fraction: float = 0.5
    max_backlog_epochs: float = 4.0
    policies: List[Tuple[str, Dict[str, Any]]] = field(default_factory=list)
    workloads: List[Dict[str, Any]] = field(default_factory=list)
    sweep: Dict[str, Any] = field(default_factory=dict)
    source: Optional[str] = None

    def calibration(self) -> Calibration:
        return load_calibration(self.calibration_path or get_config().CALIBRATION_PATH)

    def fast_pages(self, calibration: Calibration) -> int:
        return calibration.tier_model(self.page_scale, self.capacity_bytes or None).capacity(TierId.FAST)

    def cells(self, seeds: Optional[Sequence[int]] = None) -> List[Cell]:
        seeds = list(seeds) if seeds else self.seeds
        out = []
        for wi, wdef in enumerate(self.workloads):
            for policy, params in self.policies:
                for seed in seeds:
                    out.append(Cell(len(out), wi, workload_label(wdef), policy, dict(params), int(seed)))
        return out

    def build_workload(self, index: int, calibration: Calibration, profiles: Optional[Dict] = None) -> Workload:
        wdef = self.workloads[index]
        page_bytes = PAGE_SIZE * self.page_scale
        if "npb" in wdef:
            return npb_profile(
                wdef["npb"], wdef.get("footprint", "MEDIUM"), self.fast_pages(calibration),
                page_bytes=page_bytes, epoch_length=self.epoch_length, demand=wdef.get("demand"),
                profiles=profiles,
            )
        if "trace" in wdef:
            return load_trace(self._relative(wdef["trace"]))
        spec = workload_from_dict(wdef)
        if "demand_scale" in wdef:
            spec = scale_demand(spec, float(wdef["demand_scale"]))
        return spec

    def sim_config(self, cell: Cell, calibration: Calibration, profiles: Optional[Dict] = None) -> SimConfig:
        return SimConfig(
            workload=self.build_workload(cell.workload_index, calibration, profiles),
            calibration=calibration,
            policy=cell.policy,
            policy_params=cell.params,
            epoch_length=self.epoch_length,
            horizon=self.horizon,
            seed=cell.seed,
            page_scale=self.page_scale,
            capacity_bytes=self.capacity_bytes or None,
            steady_fraction=self.steady_fraction,
            max_backlog_epochs=self.max_backlog_epochs,
            name=cell.cell_id,
        )

    def _relative(self, path: str) -> str:
        if os.path.isabs(path) or not self.source:
            return path
        return os.path.join(os.path.dirname(self.source), path)

    def validate(self) -> List[Cell]:
        """Resolve every cell to a valid SimConfig; returns the cells."""
        calibration = self.calibration()
        profiles = load_profiles() if any("npb" in w for w in self.workloads) else None
        cells = self.cells()
        for cell in cells:
            cfg = self.sim_config(cell, calibration, profiles)
            cfg.validate()
            Simulation(cfg)
        return cells


def workload_label(wdef: Dict[str, Any]) -> str:
    if "npb" in wdef:
        return f"{str(wdef['npb']).upper()}-{str(wdef.get('footprint', 'MEDIUM')).upper()}"
    if "trace" in wdef:
        return wdef.get("name") or os.path.splitext(os.path.basename(wdef["trace"]))[0]
    return str(wdef.get("name", "workload"))


def _capacities(raw: Dict[str, Any]) -> Dict[TierId, int]:
    out = {}
    for name, entry in (raw or {}).items():
        tier = TierId.parse(name)
        if isinstance(entry, dict):
            out[tier] = int(float(entry["capacity_gib"]) * GIB)
        else:
            out[tier] = int(float(entry) * GIB)
    return out


def experiment_from_dict(data: Dict[str, Any], source: Optional[str] = None) -> ExperimentDef:
    if not isinstance(data, dict):
        raise ConfigError("experiment must be a mapping")
    if data.get("schema_version") != EXPERIMENT_SCHEMA_VERSION:
        raise ConfigError(f"unsupported experiment schema_version {data.get('schema_version')!r}")
    kind = data.get("kind", "matrix")
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    seeds = data.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = list(range(seeds))
    policies = []
    for entry in data.get("policies", []):
        if isinstance(entry, str):
            entry = {"name": entry}
        name = str(entry.get("name", "")).lower()
        if name not in POLICIES:
            raise ConfigError(f"unknown policy {entry.get('name')!r}")
        policies.append((name, dict(entry.get("params") or {})))
    try:
        exp = ExperimentDef(
            name=str(data["name"]),
            kind=kind,
            description=str(data.get("description", "")).strip(),
            horizon=int(data.get("horizon", 1000)),
            epoch_length=float(data.get("epoch_length", 0.01)),
            page_scale=int(data.get("page_scale", 1)),
            capacity_bytes=_capacities(data.get("tiers")),
            calibration_path=data.get("calibration"),
            seeds=[int(s) for s in seeds],
            baseline=str(data.get("baseline", "admdefault")),
            steady_fraction=float(data.get("steady_fraction", 0.5)),
            max_backlog_epochs=float(data.get("max_backlog_epochs", 4.0)),
            policies=policies,
            workloads=list(data.get("workloads", [])),
            sweep=dict(data.get("sweep") or {}),
            source=source,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed experiment: {exc}")
    if exp.kind == "matrix" and (not exp.policies or not exp.workloads):
        raise ConfigError(f"experiment {exp.name} needs at least one policy and one workload")
    if exp.calibration_path and source:
        exp.calibration_path = exp._relative(exp.calibration_path)
    return exp


def resolve_experiment(path: str) -> str:
    """A bare name like ``observation2`` resolves against the experiments directory."""
    if os.path.exists(path) or os.path.dirname(path):
        return path
    name = path if path.endswith(".exp") else f"{path}.exp"
    return os.path.join(get_config().EXPERIMENTS_DIR, name)


def load_experiment(path: str) -> ExperimentDef:
    path = resolve_experiment(path)
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read experiment {path}: {exc}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"experiment {path} is not valid YAML: {exc}")
    return experiment_from_dict(data, source=path)


# Cell execution

@dataclass
class CellOutcome:
    cell: Cell
    summary: Optional[RunSummary] = None
    error: str = ""
    artifacts: Dict[str, str] = field(default_factory=dict)

    @property
    def aborted(self) -> bool:
        return self.summary is None


def write_metrics(path: str, metrics: Sequence[EpochMetrics]) -> str:
    with open(path, "w") as fh:
        fh.write(EpochMetrics.CSV_HEADER + "\n")
        for m in metrics:
            fh.write(m.csv_row() + "\n")
    return path


def execute_cell(exp: ExperimentDef, cell: Cell, out_dir: Optional[str]) -> CellOutcome:
    """Run one cell and write its per-run artifacts; runtime failures are reported, not raised."""
    try:
        calibration = exp.calibration()
        profiles = load_profiles() if "npb" in exp.workloads[cell.workload_index] else None
        result = Simulation(exp.sim_config(cell, calibration, profiles)).run()
    except ConfigError:
        raise
    except SimulationError as exc:
        logger.error("cell %s aborted: %s", cell.cell_id, exc)
        return CellOutcome(cell, error=str(exc))
    artifacts = {}
    if out_dir:
        cell_dir = os.path.join(out_dir, "cells")
        os.makedirs(cell_dir, exist_ok=True)
        base = os.path.join(cell_dir, cell.cell_id)
        artifacts["metrics"] = write_metrics(base + ".metrics.csv", result.metrics)
        artifacts["events"] = result.event_log.write(base + ".events.log")
        with open(base + ".pages.txt", "w") as fh:
            fh.write(result.snapshot)
        artifacts["pages"] = base + ".pages.txt"
    return CellOutcome(cell, summary=result.summary, artifacts=artifacts)


def _execute_payload(payload) -> CellOutcome:
    return execute_cell(*payload)


def run_cells(exp: ExperimentDef, cells: Sequence[Cell], out_dir: Optional[str], workers: int = 1) -> List[CellOutcome]:
    payloads = [(exp, cell, out_dir) for cell in cells]
    if workers <= 1 or len(payloads) <= 1:
        return [_execute_payload(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_execute_payload, payloads))


@dataclass
class ExperimentResult:
    experiment: ExperimentDef
    outcomes: List[CellOutcome]
    averaged: List[RunSummary] = field(default_factory=list)
    comparison: List[ComparisonRow] = field(default_factory=list)
    geomean: Dict[str, float] = field(default_factory=dict)
    correlation: Optional[float] = None
    files: Dict[str, str] = field(default_factory=dict)

    @property
    def aborted(self) -> List[CellOutcome]:
        return [o for o in self.outcomes if o.aborted]


def _header(fh, timestamp: bool) -> None:
    if timestamp:
        fh.write(f"# generated {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n")


def write_summary(path: str, outcomes: Sequence[CellOutcome], timestamp: bool = True) -> str:
    with open(path, "w") as fh:
        _header(fh, timestamp)
        fh.write(SUMMARY_HEADER + "\n")
        for o in outcomes:
            if o.aborted:
                continue
            s = o.summary
            fh.write(
                f"{o.cell.cell_id},{s.workload},{s.policy},{s.seed},{s.epochs},{s.throughput:.3f},"
                f"{s.steady_throughput:.3f},{s.mean_latency:.3f},{s.energy_per_access:.4f},"
                f"{s.migrated_pages},{s.fast_traffic_share:.4f},{sum(s.violations.values())}\n"
            )
    return path


def write_regions(path: str, outcomes: Sequence[CellOutcome], timestamp: bool = True) -> str:
    with open(path, "w") as fh:
        _header(fh, timestamp)
        fh.write(REGION_HEADER + "\n")
        for o in outcomes:
            if o.aborted:
                continue
            s = o.summary
            for region in sorted(s.region_bw):
                fh.write(f"{o.cell.cell_id},{s.workload},{s.policy},{s.seed},{region},"
                         f"{s.region_latency.get(region, 0.0):.3f},{s.region_bw[region]:.3f}\n")
    return path


def write_comparison(path: str, rows: Sequence[ComparisonRow], geomean: Dict[str, float],
                     timestamp: bool = True) -> str:
    with open(path, "w") as fh:
        _header(fh, timestamp)
        fh.write(ComparisonRow.CSV_HEADER + "\n")
        for r in rows:
            fh.write(r.csv_row() + "\n")
        for policy in sorted(geomean):
            fh.write(f"GEOMEAN,{policy},,{geomean[policy]:.4f},,,,\n")
    return path


def run_experiment(exp: ExperimentDef, out_dir: Optional[str] = None, workers: int = 1,
                   seeds: Optional[Sequence[int]] = None, timestamp: bool = True) -> ExperimentResult:
    cells = exp.cells(seeds)
    exp_dir = os.path.join(out_dir, exp.name) if out_dir else None
    if exp_dir:
        os.makedirs(exp_dir, exist_ok=True)
    logger.info("experiment %s: %d cells, %d workers", exp.name, len(cells), workers)
    outcomes = run_cells(exp, cells, exp_dir, workers)
    result = ExperimentResult(exp, outcomes)

    groups: Dict[Tuple[int, str], List[RunSummary]] = {}
    for o in outcomes:
        if not o.aborted:
            groups.setdefault((o.cell.workload_index, o.cell.policy), []).append(o.summary)
    result.averaged = [average_runs(groups[k]) for k in sorted(groups)]

    if any(s.policy == exp.baseline for s in result.averaged):
        matrix = compare_matrix(result.averaged, exp.baseline)
        result.comparison = matrix["rows"]
        result.geomean = matrix["geomean"]
        result.correlation = matrix["energy_speedup_spearman"]

    if exp_dir:
        result.files["summary"] = write_summary(os.path.join(exp_dir, "summary.csv"), outcomes, timestamp)
        result.files["regions"] = write_regions(os.path.join(exp_dir, "regions.csv"), outcomes, timestamp)
        if result.comparison:
            result.files["comparison"] = write_comparison(
                os.path.join(exp_dir, "comparison.csv"), result.comparison, result.geomean, timestamp)
    return result


# Ratio sweep

@dataclass
class SweepPoint:
    demand: float
    ratio: float
    throughput: float
    latency: float


@dataclass
class SweepLevel:
    demand: float
    points: List[SweepPoint]
    best: SweepPoint
    baseline: SweepPoint

    @property
    def gain(self) -> float:
        return self.best.throughput / self.baseline.throughput if self.baseline.throughput else 1.0


def ratio_grid(step: float = 0.05, grid: Optional[Sequence[float]] = None) -> List[float]:
    if grid is not None:
        values = sorted({round(float(r), 6) for r in grid}, reverse=True)
    else:
        n = int(round(1.0 / step))
        values = [round(i / n, 6) for i in range(n, -1, -1)]
    if not values:
        raise ConfigError("ratio grid is empty")
    if any(not 0.0 <= r <= 1.0 for r in values):
        raise ConfigError("ratios must be in [0, 1]")
    return values


def pick_best(points: Sequence[SweepPoint]) -> SweepPoint:
    """Highest throughput; near-ties go to lower latency, then to the larger FAST share."""
    top = max(p.throughput for p in points)
    close = [p for p in points if p.throughput >= top * (1 - 1e-6)]
    return min(close, key=lambda p: (round(p.latency, 6), -p.ratio))


def sweep_ratio(exp: ExperimentDef, demands: Optional[Sequence[float]] = None,
                grid: Optional[Sequence[float]] = None, seed: int = 0) -> List[SweepLevel]:
    """Run a static weighted interleave at every grid ratio and demand level."""
    sweep = exp.sweep
    demands = list(demands or sweep.get("demands") or [])
    if not demands:
        raise ConfigError("ratio sweep needs at least one demand level")
    ratios = ratio_grid(float(sweep.get("grid_step", 0.05)), grid if grid is not None else sweep.get("grid"))
    calibration = exp.calibration()
    fast_pages = exp.fast_pages(calibration)
    pages = int(sweep.get("pages") or max(1, int(fast_pages * float(sweep.get("footprint", 0.75)))))
    read_fraction = float(sweep.get("read_fraction", 1.0))

    levels = []
    for demand in demands:
        spec = WorkloadSpec(
            name=f"sweep-{int(demand)}",
            regions=[RegionSpec("sweep", pages, read_fraction, float(demand))],
        )

        def measure(ratio: float) -> SweepPoint:
            cfg = SimConfig(
                workload=spec, calibration=calibration, policy="weighted_interleave",
                policy_params={"ratio": ratio}, epoch_length=exp.epoch_length, horizon=exp.horizon,
                seed=seed, page_scale=exp.page_scale, capacity_bytes=exp.capacity_bytes or None,
                steady_fraction=exp.steady_fraction, max_backlog_epochs=exp.max_backlog_epochs,
                name=f"{spec.name}-r{ratio:g}",
            )
            s = Simulation(cfg).run().summary
            return SweepPoint(float(demand), ratio, s.steady_throughput, s.mean_latency)

        points = [measure(r) for r in ratios]
        baseline = next((p for p in points if p.ratio == 1.0), None) or measure(1.0)
        best = pick_best(points)
        levels.append(SweepLevel(float(demand), points, best, baseline))
        logger.info("sweep demand %.0f MB/s: best %.0f:%.0f gain %.3f",
                    demand, best.ratio * 100, (1 - best.ratio) * 100, levels[-1].gain)
    return levels


def write_sweep(path: str, levels: Sequence[SweepLevel], timestamp: bool = True) -> str:
    with open(path, "w") as fh:
        _header(fh, timestamp)
        fh.write(SWEEP_HEADER + "\n")
        for level in levels:
            for p in level.points:
                best = int(p is level.best)
                fh.write(f"{p.demand:.0f},{p.ratio:.2f},{p.throughput:.3f},{p.latency:.3f},{best},"
                         f"{p.throughput / level.baseline.throughput if level.baseline.throughput else 1.0:.4f}\n")
    return path


# Calibration fitting

def calibration_rows(cal: Calibration) -> List[List[Any]]:
    rows = []
    for t in TIERS:
        for a in cal.models[t].anchors:
            rows.append([t.name, a.read_fraction, a.offered_demand, a.latency, a.achieved_bandwidth])
    return rows


def write_measurements(path: str, cal: Calibration) -> str:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MEASUREMENT_HEADER)
        writer.writerows(calibration_rows(cal))
    return path


def fit_calibration(csv_path: str, base: Calibration) -> Calibration:
    """Anchors from an MLC-style measurement CSV; capacities and energies come from ``base``."""
    anchors: Dict[TierId, List[Anchor]] = {t: [] for t in TIERS}
    try:
        with open(csv_path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or set(MEASUREMENT_HEADER) - set(reader.fieldnames):
                raise ConfigError(f"measurement CSV must have columns {','.join(MEASUREMENT_HEADER)}")
            for number, row in enumerate(reader, start=2):
                try:
                    anchors[TierId.parse(row["tier"])].append(Anchor(
                        float(row["read_fraction"]), float(row["demand_mbps"]),
                        float(row["latency_ns"]), float(row["bandwidth_mbps"]),
                    ))
                except (ValueError, UnknownTierError) as exc:
                    raise ConfigError(f"{csv_path} line {number}: {exc}")
    except OSError as exc:
        raise ConfigError(f"cannot read measurements {csv_path}: {exc}")

    models = {}
    for t in TIERS:
        if not anchors[t]:
            raise CalibrationError(f"no measurements for tier {t.name}")
        models[t] = TierPerformanceModel.from_anchors(anchors[t], base.models[t].divergence_knee)
    fitted = Calibration(models, dict(base.capacity_bytes), dict(base.read_energy), dict(base.write_energy),
                         base.max_offered_demand, source=csv_path)
    # re-validate through the file schema so the same monotonicity checks apply
    return calibration_from_dict(calibration_to_dict(fitted), source=csv_path)
