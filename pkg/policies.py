"""Placement policies: HyPlacer and the policies it is compared against.

Every policy is driven by the engine through ``allocation_tiers`` (first
touch), ``route`` (per-epoch traffic), ``step`` (control period boundary)
and ``tick`` (every epoch, for delayed selection).
"""
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, fields
from enum import Enum
from typing import Any, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from errors import ConfigError
from event_log import EventLog
from page_system import MigrationReport, PageTable, Traffic, zero_traffic
from selection import (PageClass, PageFindMode, PageFindRequest, Selector,
                       classify_bits)
from tier_model import (BandwidthCounters, CounterSnapshot, TIERS, TierId,
                        TierModel)

logger = logging.getLogger(__name__)

DEFAULT_MAX_PAGES = 131072
DEFAULT_CONTROL_PERIOD = 100  # epochs: 1 s at the default 10 ms epoch


def _from_dict(cls, data: Optional[Dict[str, Any]]):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} parameters: {', '.join(sorted(unknown))}")
    obj = cls(**data)
    obj.validate()
    return obj


@dataclass(frozen=True)
class HyPlacerConfig:
    dram_usage_threshold: float = 0.95
    slow_write_bw_threshold: float = 10.0  # MB/s
    max_pages_per_activation: int = DEFAULT_MAX_PAGES  # 4 KiB pages
    delay_ms: float = 50.0
    control_period: int = DEFAULT_CONTROL_PERIOD
    hysteresis: float = 0.02
    treat_full_as_on_target: bool = False

    def validate(self) -> None:
        if not 0.0 < self.dram_usage_threshold < 1.0:
            raise ConfigError("dram_usage_threshold must be in (0, 1)")
        if not 0.0 <= self.hysteresis < self.dram_usage_threshold:
            raise ConfigError("hysteresis must be in [0, dram_usage_threshold)")
        if self.slow_write_bw_threshold < 0:
            raise ConfigError("slow_write_bw_threshold must be non-negative")
        if self.max_pages_per_activation <= 0 or self.control_period <= 0:
            raise ConfigError("max_pages_per_activation and control_period must be positive")
        if self.delay_ms < 0:
            raise ConfigError("delay_ms must be non-negative")

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "HyPlacerConfig":
        return _from_dict(cls, data)


@dataclass(frozen=True)
class PolicyParams:
    """Parameters of the comparison policies; each policy reads the ones it needs."""
    control_period: int = DEFAULT_CONTROL_PERIOD
    max_pages_per_activation: int = DEFAULT_MAX_PAGES
    delay_ms: float = 50.0
    dram_usage_threshold: float = 0.95
    hysteresis: float = 0.02
    ways: int = 16
    rw_aware: bool = False
    grid_step: float = 0.05
    ratio: float = 1.0

    def validate(self) -> None:
        if self.control_period <= 0 or self.max_pages_per_activation <= 0:
            raise ConfigError("control_period and max_pages_per_activation must be positive")
        if not 0.0 < self.dram_usage_threshold < 1.0:
            raise ConfigError("dram_usage_threshold must be in (0, 1)")
        if self.ways <= 0:
            raise ConfigError("ways must be positive")
        if not 0.0 < self.grid_step <= 1.0:
            raise ConfigError("grid_step must be in (0, 1]")
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError("ratio must be in [0, 1]")

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]], **defaults) -> "PolicyParams":
        return _from_dict(cls, {**defaults, **(data or {})})


class DecisionKind(Enum):
    NONE = "none"
    DEMOTE = "demote"
    PROMOTE = "promote"
    PROMOTE_INT = "promote_int"
    SWITCH = "switch"

    @property
    def needs_delay(self) -> bool:
        return self in (DecisionKind.PROMOTE, DecisionKind.PROMOTE_INT, DecisionKind.SWITCH)


@dataclass(frozen=True)
class PlacementDecision:
    kind: DecisionKind
    count: int = 0

    def __str__(self):
        return self.kind.name if self.kind is DecisionKind.NONE else f"{self.kind.name}({self.count})"


@dataclass
class PolicyContext:
    """What a policy can see and touch during a run."""
    table: PageTable
    selector: Selector
    counters: BandwidthCounters
    tier_model: TierModel
    event_log: EventLog
    epoch_length: float = 0.01
    counter_window: int = DEFAULT_CONTROL_PERIOD

    @property
    def epoch(self) -> int:
        return self.table.epoch

    def sample(self) -> CounterSnapshot:
        return self.counters.sample(self.counter_window)

    def cap_pages(self, max_pages: int) -> int:
        return max(1, int(max_pages) // self.table.page_scale)

    def delay_epochs(self, delay_ms: float) -> int:
        epochs = delay_ms / 1000.0 / self.epoch_length
        if abs(epochs - round(epochs)) > 1e-6:
            raise ConfigError(f"delay {delay_ms} ms is not a multiple of the {self.epoch_length * 1000:g} ms epoch")
        return int(round(epochs))

    def log(self, event: str, **values) -> None:
        self.event_log.record(self.epoch, event, **values)

    def log_migration(self, policy: str, kind: str, report: MigrationReport, requested: int) -> None:
        self.log("migration", policy=policy, kind=kind, requested=requested, moved=report.moved,
                 bytes=report.bytes, cost_epochs=report.cost_epochs, reason=report.reason or "ok")
        if report.moved < requested:
            logger.debug("%s %s: selection shortfall, %d of %d pages", policy, kind, report.moved, requested)


class Routing(NamedTuple):
    """Traffic of a routed batch; ``tiers`` is the tier that served each entry."""
    app: Dict[TierId, Traffic]
    overhead: Dict[TierId, Traffic]
    tiers: np.ndarray


def _floor(x: float) -> int:
    return math.floor(x + 1e-9)


def hyplacer_decide(counters: Union[CounterSnapshot, BandwidthCounters], occupancy, cfg: HyPlacerConfig) -> PlacementDecision:
    """Pure placement decision from SLOW write bandwidth and FAST usage."""
    if isinstance(counters, BandwidthCounters):
        counters = counters.sample(cfg.control_period)
    capacity = occupancy.capacity[TierId.FAST]
    used = occupancy.used[TierId.FAST]
    cap = max(1, cfg.max_pages_per_activation // getattr(occupancy, "page_scale", 1))
    threshold = cfg.dram_usage_threshold

    above = counters.write_bw[TierId.SLOW] > cfg.slow_write_bw_threshold
    full = used / capacity > threshold
    room = max(0, _floor(threshold * capacity) - used)

    if above:
        if full:
            if cfg.treat_full_as_on_target:
                return PlacementDecision(DecisionKind.NONE)
            return PlacementDecision(DecisionKind.SWITCH, cap // 2)
        return PlacementDecision(DecisionKind.PROMOTE_INT, min(cap, room))
    if not full:
        return PlacementDecision(DecisionKind.PROMOTE, min(cap, room))
    target = _floor((threshold - cfg.hysteresis) * capacity)
    return PlacementDecision(DecisionKind.DEMOTE, min(cap, max(0, used - target)))


class Policy:
    name = "policy"
    hint = TierId.FAST

    def __init__(self, params: Optional[PolicyParams] = None):
        self.params = params or PolicyParams()

    @property
    def period(self) -> int:
        return self.params.control_period

    @property
    def max_pages(self) -> int:
        return self.params.max_pages_per_activation

    def attach(self, ctx: PolicyContext) -> None:
        """Called once before the first epoch."""

    def allocation_tiers(self, ctx: PolicyContext, page_ids: np.ndarray) -> np.ndarray:
        return np.full(page_ids.size, self.hint, dtype=np.int8)

    def route(self, ctx: PolicyContext, page_ids: np.ndarray, read_bytes: np.ndarray,
              write_bytes: np.ndarray) -> Optional[Routing]:
        """Route a batch through the policy, or None to charge each page's resident tier."""
        return None

    def step(self, ctx: PolicyContext) -> List[MigrationReport]:
        return []

    def tick(self, ctx: PolicyContext) -> List[MigrationReport]:
        return []

    def stats(self) -> Dict[str, Any]:
        return {}


class AdmDefault(Policy):
    """First-touch on FAST, no migrations."""
    name = "admdefault"


class WeightedInterleave(Policy):
    """Static placement: a ``ratio`` share of pages on FAST, spread evenly, never moved."""
    name = "weighted_interleave"

    def allocation_tiers(self, ctx: PolicyContext, page_ids: np.ndarray) -> np.ndarray:
        r = self.params.ratio
        i = page_ids.astype(float)
        on_fast = np.floor((i + 1) * r + 1e-9) > np.floor(i * r + 1e-9)
        return np.where(on_fast, TierId.FAST, TierId.SLOW).astype(np.int8)


class SetAssociativeCache:
    """Page-granular LRU cache; ``ways=1`` is direct-mapped."""

    def __init__(self, lines: int, ways: int = 16):
        self.ways = max(1, min(ways, lines))
        self.n_sets = max(1, lines // self.ways)
        self._sets: List["OrderedDict[int, float]"] = [OrderedDict() for _ in range(self.n_sets)]
        self.hits = 0
        self.misses = 0
        self.writebacks = 0

    def __contains__(self, page_id: int) -> bool:
        return page_id in self._sets[page_id % self.n_sets]

    def __len__(self) -> int:
        return sum(len(s) for s in self._sets)

    def access(self, page_id: int, write_bytes: float) -> Tuple[bool, Optional[Tuple[int, float]]]:
        """Touch a page; returns (hit, evicted (page, dirty bytes) or None)."""
        lines = self._sets[page_id % self.n_sets]
        if page_id in lines:
            self.hits += 1
            lines.move_to_end(page_id)
            lines[page_id] += write_bytes
            return True, None
        self.misses += 1
        evicted = None
        if len(lines) >= self.ways:
            victim, dirty = lines.popitem(last=False)
            evicted = (victim, dirty)
            if dirty > 0:
                self.writebacks += 1
        lines[page_id] = write_bytes
        return False, evicted


class MemoryMode(Policy):
    """FAST is a hardware-managed cache in front of SLOW; pages live on SLOW."""
    name = "memm"
    hint = TierId.SLOW

    def attach(self, ctx: PolicyContext) -> None:
        self.page_bytes = ctx.table.page_bytes
        self.cache = SetAssociativeCache(ctx.table.capacity[TierId.FAST], self.params.ways)

    def route(self, ctx, page_ids, read_bytes, write_bytes):
        app, overhead = zero_traffic(), zero_traffic()
        served = np.full(page_ids.size, TierId.FAST, dtype=np.int8)
        for i, (page_id, rb, wb) in enumerate(zip(page_ids.tolist(), read_bytes.tolist(), write_bytes.tolist())):
            hit, evicted = self.cache.access(page_id, wb)
            if evicted is not None and evicted[1] > 0:
                dirty = min(evicted[1], self.page_bytes)
                overhead[TierId.FAST].add(read_bytes=dirty)
                overhead[TierId.SLOW].add(write_bytes=dirty)
            if hit:
                app[TierId.FAST].add(rb, wb)
                continue
            # a miss is served by SLOW; the fill into FAST is overhead
            served[i] = TierId.SLOW
            app[TierId.SLOW].add(rb, wb)
            overhead[TierId.FAST].add(write_bytes=rb + wb)
        return Routing(app, overhead, served)

    def stats(self):
        return {"cache_hits": self.cache.hits, "cache_misses": self.cache.misses,
                "cache_writebacks": self.cache.writebacks}


class DelayedSelectionPolicy(Policy):
    """Policies that clear bits at a period boundary and select after a delay."""

    def __init__(self, params: Optional[PolicyParams] = None):
        super().__init__(params)
        self.pending: Optional[Tuple[Any, int]] = None

    def _open_window(self, ctx: PolicyContext, payload: Any, tiers=(TierId.SLOW,)) -> None:
        for tier in tiers:
            if tier is TierId.SLOW:
                ctx.selector.execute(PageFindRequest(PageFindMode.DCPMM_CLEAR))
            else:
                ctx.selector.clear_bits(tier)
        self.pending = (payload, ctx.epoch + ctx.delay_epochs(self.delay_ms))

    @property
    def delay_ms(self) -> float:
        return self.params.delay_ms

    def tick(self, ctx: PolicyContext) -> List[MigrationReport]:
        if self.pending is None or ctx.epoch < self.pending[1]:
            return []
        payload, _ = self.pending
        self.pending = None
        return self.select_and_migrate(ctx, payload)

    def select_and_migrate(self, ctx: PolicyContext, payload: Any) -> List[MigrationReport]:
        raise NotImplementedError


class HyPlacer(DelayedSelectionPolicy):
    name = "hyplacer"

    def __init__(self, cfg: Optional[HyPlacerConfig] = None):
        self.cfg = cfg or HyPlacerConfig()
        super().__init__(PolicyParams(
            control_period=self.cfg.control_period,
            max_pages_per_activation=self.cfg.max_pages_per_activation,
            delay_ms=self.cfg.delay_ms,
            dram_usage_threshold=self.cfg.dram_usage_threshold,
            hysteresis=self.cfg.hysteresis,
        ))
        self.decisions: Dict[str, int] = {k.name: 0 for k in DecisionKind}

    def step(self, ctx: PolicyContext) -> List[MigrationReport]:
        if self.pending is not None:
            return []
        snapshot = ctx.sample()
        occupancy = ctx.table.occupancy()
        decision = hyplacer_decide(snapshot, occupancy, self.cfg)
        self.decisions[decision.kind.name] += 1
        ctx.log("decision", policy=self.name, decision=str(decision),
                slow_write_bw=snapshot.write_bw[TierId.SLOW],
                fast_usage=occupancy.usage(TierId.FAST))
        if decision.kind is DecisionKind.NONE or decision.count == 0:
            return []
        if decision.kind is DecisionKind.DEMOTE:
            return [self._demote(ctx, decision.count)]
        self._open_window(ctx, decision)
        return []

    def _demote(self, ctx: PolicyContext, count: int) -> MigrationReport:
        reply = ctx.selector.execute(PageFindRequest(PageFindMode.DEMOTE, count))
        report = ctx.table.migrate(reply.selected, TierId.SLOW)
        ctx.log_migration(self.name, "demote", report, count)
        return report

    def select_and_migrate(self, ctx: PolicyContext, decision: PlacementDecision) -> List[MigrationReport]:
        mode = PageFindMode[decision.kind.name]
        reply = ctx.selector.execute(PageFindRequest(mode, decision.count, self.cfg.delay_ms))
        if mode is PageFindMode.SWITCH:
            report = ctx.table.exchange(reply.demote.selected, reply.promote.selected)
            ctx.log_migration(self.name, "switch", report, 2 * decision.count)
        else:
            # first touches during the delay may have used up the room
            selected = reply.selected[:ctx.table.occupancy().free(TierId.FAST)]
            report = ctx.table.migrate(selected, TierId.FAST)
            ctx.log_migration(self.name, mode.value, report, decision.count)
        return [report]

    def stats(self):
        return {f"decisions_{k.lower()}": v for k, v in self.decisions.items()}


class Partitioned(DelayedSelectionPolicy):
    """Write-intensive pages on FAST, read-dominated pages on SLOW."""
    name = "partitioned"

    def step(self, ctx: PolicyContext) -> List[MigrationReport]:
        if self.pending is None:
            self._open_window(ctx, None, tiers=TIERS)
        return []

    def select_and_migrate(self, ctx: PolicyContext, payload: Any) -> List[MigrationReport]:
        budget = ctx.cap_pages(self.max_pages)
        slow = ctx.selector.classify_after_delay(self.delay_ms, TierId.SLOW)
        fast = ctx.selector.classify_after_delay(self.delay_ms, TierId.FAST)
        writes = [p for p, c in slow.items() if c is PageClass.WRITE_INTENSIVE]
        reads = [p for p, c in fast.items() if c is PageClass.READ_INTENSIVE]

        reports = []
        room = ctx.table.occupancy().free(TierId.FAST)
        promote = writes[:min(budget, room)]
        if promote:
            report = ctx.table.migrate(promote, TierId.FAST)
            ctx.log_migration(self.name, "promote", report, len(promote))
            reports.append(report)
            budget -= report.moved
        if len(writes) > len(promote):
            logger.debug("partitioned: %d write-intensive pages left on SLOW", len(writes) - len(promote))
        demote = reads[:budget]
        if demote:
            report = ctx.table.migrate(demote, TierId.SLOW)
            ctx.log_migration(self.name, "demote", report, len(demote))
            reports.append(report)
        return reports


class FillFirstLRU(Policy):
    """Fill FAST first; promote recently referenced SLOW pages, demote CLOCK-cold FAST pages."""
    name = "fillfirst_lru"

    def step(self, ctx: PolicyContext) -> List[MigrationReport]:
        cap = ctx.cap_pages(self.max_pages)
        table = ctx.table
        slow_ids = table.resident(TierId.SLOW)
        referenced, dirty = table.bits(slow_ids)
        pool = slow_ids[referenced]
        if self.params.rw_aware and pool.size:
            pool = pool[np.argsort(~dirty[referenced], kind="stable")]
        table.clear_bits(slow_ids)

        occupancy = table.occupancy()
        capacity = occupancy.capacity[TierId.FAST]
        limit = _floor(self.params.dram_usage_threshold * capacity)
        wanted = min(pool.size, cap // 2)
        need = max(0, wanted - (limit - occupancy.used[TierId.FAST]))
        if occupancy.used[TierId.FAST] > limit:
            need = max(need, occupancy.used[TierId.FAST]
                       - _floor((self.params.dram_usage_threshold - self.params.hysteresis) * capacity))
        need = min(need, cap - wanted)

        reports = []
        if need > 0:
            reply = ctx.selector.find_demote(need, class_priority=self.params.rw_aware)
            report = table.migrate(reply.selected, TierId.SLOW)
            ctx.log_migration(self.name, "demote", report, need)
            reports.append(report)
        room = max(0, limit - table.occupancy().used[TierId.FAST])
        promote = pool[:min(wanted, room)]
        if promote.size:
            report = table.migrate(promote, TierId.FAST)
            ctx.log_migration(self.name, "promote", report, int(promote.size))
            reports.append(report)
        return reports


def best_ratio(tier_model: TierModel, demand: float, read_fraction: float, grid_step: float = 0.05) -> Tuple[float, float, float]:
    """FAST share maximising modeled aggregate bandwidth for ``demand`` MB/s.

    Ties go to lower latency, then to the larger FAST share. Returns
    (ratio, bandwidth, latency).
    """
    fast = tier_model.spec(TierId.FAST).perf
    slow = tier_model.spec(TierId.SLOW).perf
    steps = int(round(1.0 / grid_step))
    best = None
    for i in range(steps, -1, -1):
        r = i / steps
        lat_f, bw_f = fast.interpolate(read_fraction, r * demand)
        lat_s, bw_s = slow.interpolate(read_fraction, (1 - r) * demand)
        bw = bw_f + bw_s
        lat = (lat_f * bw_f + lat_s * bw_s) / bw if bw > 0 else lat_f
        key = (round(bw, 6), -round(lat, 6))
        if best is None or key > best[0]:
            best = (key, r, bw, lat)
    return best[1], best[2], best[3]


class BandwidthBalance(DelayedSelectionPolicy):
    """Keep hot pages split between the tiers at the bandwidth-maximising ratio."""
    name = "bwbalance"
    hint = TierId.SLOW

    def step(self, ctx: PolicyContext) -> List[MigrationReport]:
        if self.pending is None:
            self._open_window(ctx, ctx.sample(), tiers=TIERS)
        return []

    def select_and_migrate(self, ctx: PolicyContext, snapshot: CounterSnapshot) -> List[MigrationReport]:
        table = ctx.table
        demand = sum(snapshot.total_bw(t) for t in TIERS)
        reads = sum(snapshot.read_bw[t] for t in TIERS)
        read_fraction = reads / demand if demand > 0 else 1.0
        ratio, bw, _ = best_ratio(ctx.tier_model, demand, read_fraction, self.params.grid_step)

        ids = {t: table.resident(t) for t in TIERS}
        classes = {t: classify_bits(*table.bits(ids[t])) for t in TIERS}
        hot = {t: ids[t][classes[t] != PageClass.COLD] for t in TIERS}
        cold_fast = ids[TierId.FAST][classes[TierId.FAST] == PageClass.COLD]
        n_hot = hot[TierId.FAST].size + hot[TierId.SLOW].size
        target = int(round(ratio * n_hot))
        delta = target - hot[TierId.FAST].size
        ctx.log("rebalance", policy=self.name, ratio=ratio, modeled_bw=bw, hot_pages=n_hot, delta=delta)

        budget = ctx.cap_pages(self.max_pages)
        reports = []
        if delta > 0:
            n = min(delta, hot[TierId.SLOW].size, budget)
            room = table.occupancy().free(TierId.FAST)
            if n > room:
                evict = cold_fast[:min(n - room, budget - n)]
                report = table.migrate(evict, TierId.SLOW)
                ctx.log_migration(self.name, "demote", report, int(evict.size))
                reports.append(report)
                n = min(n, table.occupancy().free(TierId.FAST))
            if n > 0:
                report = table.migrate(hot[TierId.SLOW][:n], TierId.FAST)
                ctx.log_migration(self.name, "promote", report, n)
                reports.append(report)
        elif delta < 0:
            n = min(-delta, budget, table.occupancy().free(TierId.SLOW))
            report = table.migrate(hot[TierId.FAST][:n], TierId.SLOW)
            ctx.log_migration(self.name, "demote", report, n)
            reports.append(report)
        return reports


POLICIES = {
    "admdefault": AdmDefault,
    "memm": MemoryMode,
    "partitioned": Partitioned,
    "fillfirst_lru": FillFirstLRU,
    "bwbalance": BandwidthBalance,
    "hyplacer": HyPlacer,
    "weighted_interleave": WeightedInterleave,
}

# Defaults that differ from PolicyParams per policy.
POLICY_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "bwbalance": {"control_period": 400, "max_pages_per_activation": 100000},
}


def make_policy(name: str, params: Optional[Dict[str, Any]] = None) -> Policy:
    key = str(name).lower()
    if key not in POLICIES:
        raise ConfigError(f"unknown policy {name!r}; known: {', '.join(sorted(POLICIES))}")
    if key == "hyplacer":
        return HyPlacer(HyPlacerConfig.from_dict(params))
    return POLICIES[key](PolicyParams.from_dict(params, **POLICY_DEFAULTS.get(key, {})))
