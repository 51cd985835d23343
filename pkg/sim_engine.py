"""Epoch loop: workload -> page tables -> tiers -> counters -> policy."""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from errors import ComparisonError, ConfigError, SimulationError
from event_log import EventLog
from page_system import MigrationReport, PageTable, zero_traffic
from policies import DelayedSelectionPolicy, Policy, PolicyContext, make_policy
from selection import Selector
from tier_model import CACHELINE, MB, TIERS, BandwidthCounters, Calibration, TierId
from workload import Workload, generate

logger = logging.getLogger(__name__)

# Queue components per tier.
APP_R, APP_W, MIG_R, MIG_W = range(4)
_REL_TOL = 1e-6


@dataclass
class SimConfig:
    workload: Workload
    calibration: Calibration
    policy: str = "admdefault"
    policy_params: Dict[str, Any] = field(default_factory=dict)
    epoch_length: float = 0.01
    horizon: int = 1000
    seed: int = 0
    page_scale: int = 1
    capacity_bytes: Optional[Dict[TierId, int]] = None
    counter_window: Optional[int] = None
    steady_fraction: float = 0.5
    copy_bandwidth: float = 10000.0
    max_backlog_epochs: float = 4.0
    check_invariants: bool = True
    name: str = ""

    def validate(self) -> None:
        if self.horizon < 0:
            raise ConfigError("horizon must be non-negative")
        if self.epoch_length <= 0:
            raise ConfigError("epoch_length must be positive")
        if self.page_scale < 1:
            raise ConfigError("page_scale must be at least 1")
        if not 0.0 < self.steady_fraction <= 1.0:
            raise ConfigError("steady_fraction must be in (0, 1]")
        if self.counter_window is not None and self.counter_window <= 0:
            raise ConfigError("counter_window must be positive")
        if self.max_backlog_epochs <= 0:
            raise ConfigError("max_backlog_epochs must be positive")


@dataclass
class EpochMetrics:
    epoch: int
    offered_bw: Dict[TierId, float]
    achieved_bw: Dict[TierId, float]
    latency: Dict[TierId, float]
    energy: Dict[TierId, float]
    app_bw: float
    migrated_pages: int
    migrated_bytes: int
    occupancy: Dict[TierId, int]
    backlog_bytes: float

    CSV_HEADER = (
        "epoch,fast_offered_mbps,fast_achieved_mbps,fast_latency_ns,fast_energy_nj,"
        "slow_offered_mbps,slow_achieved_mbps,slow_latency_ns,slow_energy_nj,"
        "app_mbps,migrated_pages,migrated_bytes,fast_used_pages,slow_used_pages,backlog_bytes"
    )

    def csv_row(self) -> str:
        cols = [str(self.epoch)]
        for t in TIERS:
            cols += [f"{self.offered_bw[t]:.3f}", f"{self.achieved_bw[t]:.3f}",
                     f"{self.latency[t]:.3f}", f"{self.energy[t]:.1f}"]
        cols += [f"{self.app_bw:.3f}", str(self.migrated_pages), str(self.migrated_bytes),
                 str(self.occupancy[TierId.FAST]), str(self.occupancy[TierId.SLOW]),
                 f"{self.backlog_bytes:.1f}"]
        return ",".join(cols)


@dataclass
class RunSummary:
    name: str
    policy: str
    workload: str
    seed: int
    epochs: int
    throughput: float = 0.0         # MB/s of application bytes over the whole run
    steady_throughput: float = 0.0  # MB/s over the trailing steady window
    mean_latency: float = 0.0       # ns, traffic-weighted over the steady window
    total_energy: float = 0.0       # nJ
    energy_per_access: float = 0.0  # nJ per serviced application cacheline
    migrated_pages: int = 0
    fast_traffic_share: float = 0.0
    region_latency: Dict[str, float] = field(default_factory=dict)
    region_bw: Dict[str, float] = field(default_factory=dict)
    throttled_bytes: float = 0.0    # bytes held back while a backlog was full
    violations: Dict[str, int] = field(default_factory=dict)
    policy_stats: Dict[str, Any] = field(default_factory=dict)
    tier_signature: str = ""
    seeds: int = 1
    throughput_range: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RunResult:
    summary: RunSummary
    metrics: List[EpochMetrics]
    event_log: EventLog
    snapshot: str = ""


class InvariantChecker:
    """Counts violations of the engine's conservation properties."""

    NAMES = ("page_conservation", "exchange_fixed_point", "work_conservation", "rate_bound")

    def __init__(self):
        self.violations = {n: 0 for n in self.NAMES}
        self._resident = 0

    def _flag(self, name: str, message: str) -> None:
        self.violations[name] += 1
        logger.warning("invariant %s violated: %s", name, message)

    def pages(self, table: PageTable) -> None:
        occ = table.occupancy()
        resident = table.resident_count()
        if resident != sum(occ.used.values()) or resident < self._resident:
            self._flag("page_conservation", f"{resident} resident vs {occ.used}")
        if any(occ.used[t] > occ.capacity[t] for t in TIERS):
            self._flag("page_conservation", f"over capacity: {occ.used}")
        self._resident = resident

    def exchange(self, before: Dict[TierId, int], after: Dict[TierId, int], reports: Sequence[MigrationReport]) -> None:
        if reports and all(r.dest is None for r in reports) and before != after:
            self._flag("exchange_fixed_point", f"{before} -> {after}")

    def work(self, offered: float, serviced: float, backlog: float) -> None:
        if abs(offered - serviced - backlog) > _REL_TOL * max(1.0, offered):
            self._flag("work_conservation", f"offered {offered:.0f} != serviced {serviced:.0f} + backlog {backlog:.0f}")

    def rate(self, moved: int, cap: int) -> None:
        if moved > cap:
            self._flag("rate_bound", f"{moved} pages moved in one period, cap {cap}")


class Simulation:
    """One single-threaded, deterministic run."""

    def __init__(self, cfg: SimConfig, policy: Optional[Policy] = None):
        cfg.validate()
        self.cfg = cfg
        self.tiers = cfg.calibration.tier_model(cfg.page_scale, cfg.capacity_bytes)
        self.policy = policy or make_policy(cfg.policy, cfg.policy_params)
        self.event_log = EventLog()
        self.table = PageTable(
            {t: self.tiers.capacity(t) for t in TIERS},
            page_scale=cfg.page_scale, epoch_length=cfg.epoch_length, copy_bandwidth=cfg.copy_bandwidth,
        )
        self.counters = BandwidthCounters(cfg.epoch_length)
        self.rate_cap = max(1, self.policy.max_pages // cfg.page_scale)
        self.selector = Selector(self.table, cfg.epoch_length, cap=self.rate_cap, event_log=self.event_log)
        self.ctx = PolicyContext(
            table=self.table, selector=self.selector, counters=self.counters, tier_model=self.tiers,
            event_log=self.event_log, epoch_length=cfg.epoch_length,
            counter_window=cfg.counter_window or self.policy.period,
        )
        if isinstance(self.policy, DelayedSelectionPolicy):
            delay = self.ctx.delay_epochs(self.policy.delay_ms)
            if delay >= self.policy.period:
                raise ConfigError(f"delay of {delay} epochs does not fit in a {self.policy.period}-epoch period")
        self.workload = cfg.workload
        validate = getattr(self.workload, "validate", None)
        if validate is not None:
            validate(self.tiers.capacity(TierId.FAST))
        self.workload.bind(self.table)
        self.policy.attach(self.ctx)
        self.checker = InvariantChecker()

        self._queue = {t: np.zeros(4) for t in TIERS}
        # each tier queues at most max_backlog_epochs of its peak bandwidth
        self._backlog_cap = {t: cfg.max_backlog_epochs * self.tiers.spec(t).perf.peak_read_bw * MB * cfg.epoch_length
                             for t in TIERS}
        self._throttled = 0.0
        self._offered = 0.0
        self._serviced = 0.0
        self._period_moved = 0
        self._region_names = [r.name for r in getattr(self.workload, "regions", [])] or ["all"]

    def _first_touch(self, batch) -> None:
        ids = batch.page_ids
        fresh = self.table.tier_of(ids) < 0
        if not fresh.any():
            return
        ids = ids[fresh]
        writes = batch.writes[fresh] > 0
        wanted = self.policy.allocation_tiers(self.ctx, ids)
        for tier in TIERS:
            group = wanted == tier
            if not group.any():
                continue
            placed = self.table.allocate_many(ids[group], tier, writes[group])
            fallback = int(np.count_nonzero(placed != tier))
            if fallback:
                logger.debug("%d pages fell back from %s at epoch %d", fallback, tier.name, self.table.epoch)
                self.event_log.record(self.table.epoch, "fallback", wanted=tier.name, pages=fallback)

    def _region_bytes(self, batch, read_bytes, write_bytes, served_by=None) -> np.ndarray:
        """Application bytes per (region, tier) for this epoch's batch."""
        n_regions = len(self._region_names)
        total = read_bytes + write_bytes
        if served_by is None:
            served_by = self.table.tier_of(batch.page_ids)
        tiers = np.asarray(served_by).astype(np.int64)
        idx = batch.region.astype(np.int64) * len(TIERS) + tiers
        counts = np.bincount(idx, weights=total, minlength=n_regions * len(TIERS))
        return counts[: n_regions * len(TIERS)].reshape(n_regions, len(TIERS))

    def _bound_backlog(self, tier: TierId, rest: np.ndarray) -> np.ndarray:
        """Trim a tier's leftover queue to its cap.

        Bytes over the cap were never issued: the application stalls instead
        of queueing them, so they leave the offered total too.
        """
        total = rest.sum()
        cap = self._backlog_cap[tier]
        if total <= cap:
            return rest
        self._throttled += total - cap
        self._offered -= total - cap
        return rest * (cap / total)

    def _control(self, epoch: int) -> List[MigrationReport]:
        """Policy activation at the boundary that opens ``epoch``.

        Migrations made here are charged to ``epoch`` along with its batch.
        """
        before = self.table.occupancy().used
        reports: List[MigrationReport] = []
        if epoch and epoch % self.policy.period == 0:
            self.checker.rate(self._period_moved, self.rate_cap)
            self._period_moved = 0
            reports += self.policy.step(self.ctx)
        reports += self.policy.tick(self.ctx)
        self._period_moved += sum(r.moved for r in reports)
        if self.cfg.check_invariants:
            self.checker.exchange(before, self.table.occupancy().used, reports)
        return reports

    def run(self) -> RunResult:
        cfg = self.cfg
        metrics: List[EpochMetrics] = []
        n_regions = len(self._region_names)
        region_bw = np.zeros(n_regions)
        region_lat = np.zeros(n_regions)
        region_weight = np.zeros(n_regions)
        steady_start = cfg.horizon - int(math.ceil(cfg.horizon * cfg.steady_fraction))
        steady_app = steady_lat = steady_weight = 0.0
        total_app = total_energy = 0.0
        fast_app = 0.0

        logger.info("run %s: policy=%s workload=%s seed=%d horizon=%d",
                    cfg.name or "-", self.policy.name, self.workload.name, cfg.seed, cfg.horizon)
        for epoch in range(cfg.horizon):
            reports = self._control(epoch)
            moved = sum(r.moved for r in reports)
            batch = generate(self.workload, epoch, cfg.seed, self.table.page_bytes, cfg.epoch_length)
            if batch.clamped:
                self.event_log.record(epoch, "clamped", entries=len(batch))
            self._first_touch(batch)
            resident_traffic = self.table.apply_access_batch(batch)
            read_bytes, write_bytes = self.table.entry_traffic(batch)
            routed = self.policy.route(self.ctx, batch.page_ids, read_bytes, write_bytes)
            if routed is None:
                app, overhead, served_by = resident_traffic, zero_traffic(), None
            else:
                app, overhead, served_by = routed
            migration = self.table.drain_migration_traffic()
            by_region = self._region_bytes(batch, read_bytes, write_bytes, served_by)

            offered, achieved, latency, energy = {}, {}, {}, {}
            app_serviced = {}
            for t in TIERS:
                new = np.array([
                    app[t].read_bytes, app[t].write_bytes,
                    migration[t].read_bytes + overhead[t].read_bytes,
                    migration[t].write_bytes + overhead[t].write_bytes,
                ])
                self.counters.record(t, new[APP_R] + new[MIG_R], new[APP_W] + new[MIG_W])
                self._offered += new.sum()
                q = self._queue[t] + new
                result = self.tiers.service_epoch(t, q[APP_R] + q[MIG_R], q[APP_W] + q[MIG_W], cfg.epoch_length)
                served = q * result.serviced_fraction
                self._queue[t] = self._bound_backlog(t, q - served)
                self._serviced += served.sum()
                offered[t] = result.offered_bw
                achieved[t] = result.achieved_bw
                latency[t] = result.mean_latency
                energy[t] = result.energy
                app_serviced[t] = served[APP_R] + served[APP_W]
            self.counters.close_epoch()
            self.table.end_epoch()

            epoch_app = sum(app_serviced.values())
            total_app += epoch_app
            fast_app += app_serviced[TierId.FAST]
            total_energy += sum(energy.values())
            tier_new = by_region.sum(axis=0)
            for t in TIERS:
                if tier_new[t] > 0:
                    share = by_region[:, t] / tier_new[t]
                    if epoch >= steady_start:
                        region_bw += share * app_serviced[t]
                        region_lat += by_region[:, t] * latency[t]
                        region_weight += by_region[:, t]
            if epoch >= steady_start:
                steady_app += epoch_app
                for t in TIERS:
                    steady_lat += app_serviced[t] * latency[t]
                    steady_weight += app_serviced[t]

            if cfg.check_invariants:
                self.checker.pages(self.table)
                backlog = sum(q.sum() for q in self._queue.values())
                self.checker.work(self._offered, self._serviced, backlog)

            metrics.append(EpochMetrics(
                epoch=epoch,
                offered_bw=offered,
                achieved_bw=achieved,
                latency=latency,
                energy=energy,
                app_bw=epoch_app / cfg.epoch_length / MB,
                migrated_pages=moved,
                migrated_bytes=sum(r.bytes for r in reports),
                occupancy=self.table.occupancy().used,
                backlog_bytes=float(sum(q.sum() for q in self._queue.values())),
            ))

        summary = self._summarize(total_app, steady_app, steady_lat, steady_weight, total_energy, fast_app,
                                  region_bw, region_lat, region_weight, steady_start)
        logger.info("run %s finished: steady throughput %.1f MB/s, %d pages migrated",
                    summary.name, summary.steady_throughput, summary.migrated_pages)
        return RunResult(summary, metrics, self.event_log, self.table.snapshot())

    def _summarize(self, total_app, steady_app, steady_lat, steady_weight, total_energy, fast_app,
                   region_bw, region_lat, region_weight, steady_start) -> RunSummary:
        cfg = self.cfg
        seconds = cfg.horizon * cfg.epoch_length
        steady_seconds = (cfg.horizon - steady_start) * cfg.epoch_length
        lines = total_app / CACHELINE
        return RunSummary(
            name=cfg.name or f"{self.workload.name}/{self.policy.name}/s{cfg.seed}",
            policy=self.policy.name,
            workload=self.workload.name,
            seed=cfg.seed,
            epochs=cfg.horizon,
            throughput=total_app / seconds / MB if seconds else 0.0,
            steady_throughput=steady_app / steady_seconds / MB if steady_seconds else 0.0,
            mean_latency=steady_lat / steady_weight if steady_weight else 0.0,
            total_energy=total_energy,
            energy_per_access=total_energy / lines if lines else 0.0,
            migrated_pages=self.table.migrated_pages,
            fast_traffic_share=fast_app / total_app if total_app else 0.0,
            region_latency={n: float(region_lat[i] / region_weight[i])
                            for i, n in enumerate(self._region_names) if region_weight[i] > 0},
            region_bw={n: float(region_bw[i] / steady_seconds / MB)
                       for i, n in enumerate(self._region_names) if steady_seconds},
            violations=dict(self.checker.violations),
            policy_stats=self.policy.stats(),
            throttled_bytes=self._throttled,
            tier_signature=self.tier_signature(),
        )

    def tier_signature(self) -> str:
        parts = [f"{t.name}:{self.tiers.capacity(t)}" for t in TIERS]
        return f"{','.join(parts)}@{self.cfg.page_scale}"


def run(cfg: SimConfig) -> RunResult:
    return Simulation(cfg).run()


# Comparison

@dataclass
class ComparisonRow:
    workload: str
    policy: str
    throughput: float
    speedup: float
    energy_ratio: float
    mean_latency: float
    migrated_pages: int
    throughput_range: float = 0.0

    CSV_HEADER = "workload,policy,throughput_mbps,speedup,energy_ratio,mean_latency_ns,migrated_pages,throughput_range"

    def csv_row(self) -> str:
        return (f"{self.workload},{self.policy},{self.throughput:.3f},{self.speedup:.4f},"
                f"{self.energy_ratio:.4f},{self.mean_latency:.3f},{self.migrated_pages},{self.throughput_range:.3f}")


def geometric_mean(values: Sequence[float]) -> float:
    values = [v for v in values]
    if not values:
        return 0.0
    if any(v <= 0 for v in values):
        raise ComparisonError("geometric mean needs positive values")
    return float(math.exp(sum(math.log(v) for v in values) / len(values)))


def compare(runs: Sequence[RunSummary], baseline: str = "admdefault") -> List[ComparisonRow]:
    """Speedup and energy ratio of each run against the baseline policy's run."""
    if not runs:
        return []
    workloads = {r.workload for r in runs}
    signatures = {r.tier_signature for r in runs}
    if len(workloads) > 1 or len(signatures) > 1:
        raise ComparisonError(f"runs do not share a workload and tier config: {sorted(workloads)}")
    base = [r for r in runs if r.policy == baseline]
    if not base:
        raise ComparisonError(f"no {baseline} run to compare against")
    base = base[0]
    if base.steady_throughput <= 0:
        raise ComparisonError(f"baseline {base.name} has zero throughput")
    rows = []
    for r in runs:
        energy_ratio = r.energy_per_access / base.energy_per_access if base.energy_per_access else 1.0
        rows.append(ComparisonRow(
            workload=r.workload, policy=r.policy, throughput=r.steady_throughput,
            speedup=1.0 if r is base else r.steady_throughput / base.steady_throughput,
            energy_ratio=1.0 if r is base else energy_ratio,
            mean_latency=r.mean_latency, migrated_pages=r.migrated_pages,
            throughput_range=r.throughput_range,
        ))
    return rows


def compare_matrix(runs: Sequence[RunSummary], baseline: str = "admdefault") -> Dict[str, Any]:
    """Per-workload comparison plus geometric means per policy and the energy/speedup rank correlation."""
    by_workload: Dict[str, List[RunSummary]] = {}
    for r in runs:
        by_workload.setdefault(r.workload, []).append(r)
    rows: List[ComparisonRow] = []
    for name in sorted(by_workload):
        rows.extend(compare(by_workload[name], baseline))
    geomean = {}
    for policy in sorted({r.policy for r in rows}):
        geomean[policy] = geometric_mean([r.speedup for r in rows if r.policy == policy])
    others = [r for r in rows if r.policy != baseline]
    correlation = spearman([r.speedup for r in others], [r.energy_ratio for r in others]) if len(others) > 2 else None
    return {"rows": rows, "geomean": geomean, "energy_speedup_spearman": correlation}


def _ranks(values: Sequence[float]) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    ranks[order] = np.arange(values.size, dtype=float)
    for v in np.unique(values):
        tie = values == v
        ranks[tie] = ranks[tie].mean()
    return ranks


def spearman(a: Sequence[float], b: Sequence[float]) -> Optional[float]:
    """Spearman rank correlation with average ranks for ties."""
    if len(a) != len(b) or len(a) < 2:
        return None
    ra, rb = _ranks(a), _ranks(b)
    if ra.std() == 0 or rb.std() == 0:
        return None
    return float(np.corrcoef(ra, rb)[0, 1])


def average_runs(runs: Sequence[RunSummary]) -> RunSummary:
    """Mean over seeds of one (workload, policy) cell; keeps the throughput range."""
    if not runs:
        raise SimulationError("nothing to average")
    first = runs[0]
    mean = lambda attr: float(np.mean([getattr(r, attr) for r in runs]))
    throughputs = [r.steady_throughput for r in runs]
    violations = {k: sum(r.violations.get(k, 0) for r in runs) for k in first.violations}
    return RunSummary(
        name=f"{first.workload}/{first.policy}",
        policy=first.policy,
        workload=first.workload,
        seed=first.seed,
        epochs=first.epochs,
        throughput=mean("throughput"),
        steady_throughput=mean("steady_throughput"),
        mean_latency=mean("mean_latency"),
        total_energy=mean("total_energy"),
        energy_per_access=mean("energy_per_access"),
        migrated_pages=int(round(mean("migrated_pages"))),
        fast_traffic_share=mean("fast_traffic_share"),
        throttled_bytes=mean("throttled_bytes"),
        region_latency={k: float(np.mean([r.region_latency.get(k, 0.0) for r in runs])) for k in first.region_latency},
        region_bw={k: float(np.mean([r.region_bw.get(k, 0.0) for r in runs])) for k in first.region_bw},
        violations=violations,
        policy_stats=first.policy_stats,
        tier_signature=first.tier_signature,
        seeds=len(runs),
        throughput_range=max(throughputs) - min(throughputs),
    )
