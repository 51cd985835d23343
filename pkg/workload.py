"""Workload generation: region workloads, NPB-like profiles and recorded traces."""
import logging
import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
import yaml

from errors import ConfigError, TraceFormatError
from tier_model import CACHELINE, MB, PAGE_SIZE

logger = logging.getLogger(__name__)

PROFILE_SCHEMA_VERSION = 1
TRACE_MAGIC = "# hmsim-trace v1"


class Pattern(Enum):
    SEQUENTIAL = "sequential"
    RANDOM = "random"

    @classmethod
    def parse(cls, value) -> "Pattern":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown access pattern {value!r}")


class FootprintClass(Enum):
    SMALL = "SMALL"
    MEDIUM = "MEDIUM"
    LARGE = "LARGE"

    @classmethod
    def parse(cls, value) -> "FootprintClass":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ConfigError(f"unknown footprint class {value!r}")

    @property
    def factor(self) -> float:
        return FOOTPRINT_FACTORS[self]

    @property
    def bounds(self) -> Tuple[float, float]:
        return FOOTPRINT_BOUNDS[self]


# Footprint relative to FAST capacity.
FOOTPRINT_FACTORS = {FootprintClass.SMALL: 0.8, FootprintClass.MEDIUM: 1.5, FootprintClass.LARGE: 3.5}
FOOTPRINT_BOUNDS = {
    FootprintClass.SMALL: (0.0, 1.0),
    FootprintClass.MEDIUM: (1.3, 1.7),
    FootprintClass.LARGE: (3.2, 3.8),
}


@dataclass(frozen=True)
class PhaseChange:
    start_epoch: int
    demand: float
    read_fraction: float
    active: bool = True
    pattern: Optional[Pattern] = None


@dataclass(frozen=True)
class RegionSpec:
    name: str
    pages: int
    read_fraction: float = 1.0
    demand: float = 0.0  # offered MB/s
    pattern: Pattern = Pattern.SEQUENTIAL
    active: bool = True
    phase_schedule: Tuple[PhaseChange, ...] = ()
    pid: int = 0

    def validate(self) -> None:
        if self.pages <= 0:
            raise ConfigError(f"region {self.name}: pages must be positive")
        for rf in [self.read_fraction] + [p.read_fraction for p in self.phase_schedule]:
            if not 0.0 <= rf <= 1.0:
                raise ConfigError(f"region {self.name}: read_fraction {rf} outside [0, 1]")
        for d in [self.demand] + [p.demand for p in self.phase_schedule]:
            if d < 0:
                raise ConfigError(f"region {self.name}: negative demand {d}")
        starts = [p.start_epoch for p in self.phase_schedule]
        if starts != sorted(starts) or any(s < 0 for s in starts):
            raise ConfigError(f"region {self.name}: phase schedule must be ordered by start epoch")

    def state_at(self, epoch: int) -> Tuple[float, float, bool, Pattern]:
        """(demand, read_fraction, active, pattern) in effect at ``epoch``."""
        state = (self.demand, self.read_fraction, self.active, self.pattern)
        for change in self.phase_schedule:
            if change.start_epoch > epoch:
                break
            state = (change.demand, change.read_fraction, change.active, change.pattern or self.pattern)
        return state

    def segments(self) -> List[Tuple[int, Optional[int], float, bool, Pattern]]:
        """Constant-state segments as (start, end or None, demand, active, pattern)."""
        points = [(0, self.demand, self.active, self.pattern)]
        for c in self.phase_schedule:
            entry = (c.start_epoch, c.demand, c.active, c.pattern or self.pattern)
            if c.start_epoch == 0:
                points[0] = entry
            else:
                points.append(entry)
        out = []
        for i, (start, demand, active, pattern) in enumerate(points):
            end = points[i + 1][0] if i + 1 < len(points) else None
            out.append((start, end, demand, active, pattern))
        return out


@dataclass
class AccessBatch:
    epoch: int
    page_ids: np.ndarray
    reads: np.ndarray
    writes: np.ndarray
    region: np.ndarray = None
    clamped: bool = False

    def __post_init__(self):
        if self.region is None:
            self.region = np.zeros(self.page_ids.size, dtype=np.int16)

    def __len__(self) -> int:
        return int(self.page_ids.size)

    @property
    def entries(self) -> List[Tuple[int, int, int]]:
        return list(zip(self.page_ids.tolist(), self.reads.tolist(), self.writes.tolist()))

    @property
    def total_reads(self) -> int:
        return int(self.reads.sum())

    @property
    def total_writes(self) -> int:
        return int(self.writes.sum())

    @classmethod
    def empty(cls, epoch: int) -> "AccessBatch":
        z = np.zeros(0, dtype=np.int64)
        return cls(epoch, z, z.copy(), z.copy())


def pages_per_epoch(demand: float, page_bytes: int, epoch_length: float) -> int:
    return int(math.ceil(demand * MB * epoch_length / page_bytes)) if demand > 0 else 0


def _spread(total: int, k: int) -> np.ndarray:
    """``total`` split over ``k`` slots, the first ``total % k`` getting one extra."""
    out = np.full(k, total // k, dtype=np.int64)
    out[: total % k] += 1
    return out


class Workload:
    """Common surface of declarative and trace-backed workloads."""

    name: str

    def processes(self) -> Dict[int, int]:
        raise NotImplementedError

    def batch(self, epoch: int, seed: int, page_bytes: int = PAGE_SIZE, epoch_length: float = 0.01) -> AccessBatch:
        raise NotImplementedError

    @property
    def total_pages(self) -> int:
        return sum(self.processes().values())

    def bind(self, table) -> Dict[int, int]:
        """Bind every process in ascending pid order; returns pid -> first page id."""
        return {pid: table.bind_process(pid, pages) for pid, pages in sorted(self.processes().items())}


@dataclass
class WorkloadSpec(Workload):
    name: str
    regions: List[RegionSpec]
    footprint_class: Optional[FootprintClass] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def processes(self) -> Dict[int, int]:
        procs: Dict[int, int] = {}
        for r in self.regions:
            procs[r.pid] = procs.get(r.pid, 0) + r.pages
        return procs

    def region_bases(self) -> List[int]:
        """Global id of each region's first page, matching ``bind`` order."""
        first, offset = {}, 0
        for pid, pages in sorted(self.processes().items()):
            first[pid] = offset
            offset += pages
        cursor = dict(first)
        bases = []
        for r in self.regions:
            bases.append(cursor[r.pid])
            cursor[r.pid] += r.pages
        return bases

    def validate(self, fast_capacity_pages: Optional[int] = None) -> None:
        if not self.regions:
            raise ConfigError(f"workload {self.name} has no regions")
        for r in self.regions:
            r.validate()
        if self.footprint_class is not None and fast_capacity_pages:
            lo, hi = self.footprint_class.bounds
            ratio = self.total_pages / fast_capacity_pages
            if not lo < ratio <= hi:
                raise ConfigError(
                    f"workload {self.name}: footprint {ratio:.2f}x FAST is outside "
                    f"{self.footprint_class.value} bounds ({lo}, {hi}]"
                )

    def _sequential_offset(self, region: RegionSpec, epoch: int, page_bytes: int, epoch_length: float) -> int:
        offset = 0
        for start, end, demand, active, pattern in region.segments():
            if start >= epoch:
                break
            if not active or pattern is not Pattern.SEQUENTIAL:
                continue
            span = min(end if end is not None else epoch, epoch) - start
            k = min(pages_per_epoch(demand, page_bytes, epoch_length), region.pages)
            offset += span * k
        return offset

    def batch(self, epoch: int, seed: int, page_bytes: int = PAGE_SIZE, epoch_length: float = 0.01) -> AccessBatch:
        ids, reads, writes, region_idx, position = [], [], [], [], []
        clamped = False
        for idx, (region, base) in enumerate(zip(self.regions, self.region_bases())):
            demand, rf, active, pattern = region.state_at(epoch)
            if not active or demand <= 0:
                continue
            nbytes = demand * MB * epoch_length
            k = pages_per_epoch(demand, page_bytes, epoch_length)
            lines = int(round(nbytes / CACHELINE))
            if k > region.pages:
                clamped = True
                k = region.pages
                lines = min(lines, k * (page_bytes // CACHELINE))
                logger.debug("region %s demand %.0f MB/s clamped at epoch %d", region.name, demand, epoch)

            if pattern is Pattern.SEQUENTIAL:
                start = self._sequential_offset(region, epoch, page_bytes, epoch_length) % region.pages
                local = (start + np.arange(k)) % region.pages
            else:
                rng = np.random.default_rng([seed, epoch, idx])
                local = np.sort(rng.choice(region.pages, size=k, replace=False))

            n_lines = _spread(lines, k)
            n_reads = _spread(int(round(lines * rf)), k)
            ids.append(base + local.astype(np.int64))
            reads.append(n_reads)
            writes.append(n_lines - n_reads)
            region_idx.append(np.full(k, idx, dtype=np.int16))
            position.append(np.arange(k))

        if not ids:
            return AccessBatch.empty(epoch)
        ids, reads, writes = np.concatenate(ids), np.concatenate(reads), np.concatenate(writes)
        region_idx, position = np.concatenate(region_idx), np.concatenate(position)
        # round-robin across regions so concurrent first touches interleave
        order = np.lexsort((region_idx, position))
        keep = (reads[order] + writes[order]) > 0
        order = order[keep]
        return AccessBatch(epoch, ids[order], reads[order], writes[order], region_idx[order], clamped)


def generate(spec: Workload, epoch: int, rng_seed: int, page_bytes: int = PAGE_SIZE,
             epoch_length: float = 0.01) -> AccessBatch:
    return spec.batch(epoch, rng_seed, page_bytes, epoch_length)


# Config files

def region_from_dict(data: Dict[str, Any]) -> RegionSpec:
    try:
        schedule = tuple(
            PhaseChange(
                start_epoch=int(p["start_epoch"]),
                demand=float(p.get("demand", data.get("demand", 0.0))),
                read_fraction=float(p.get("read_fraction", data.get("read_fraction", 1.0))),
                active=bool(p.get("active", True)),
                pattern=Pattern.parse(p["pattern"]) if "pattern" in p else None,
            )
            for p in data.get("phase_schedule", [])
        )
        return RegionSpec(
            name=str(data.get("name", "region")),
            pages=int(data["pages"]),
            read_fraction=float(data.get("read_fraction", 1.0)),
            demand=float(data.get("demand", 0.0)),
            pattern=Pattern.parse(data.get("pattern", "sequential")),
            active=bool(data.get("active", True)),
            phase_schedule=schedule,
            pid=int(data.get("pid", 0)),
        )
    except KeyError as exc:
        raise ConfigError(f"region is missing required key {exc}")


def workload_from_dict(data: Dict[str, Any]) -> WorkloadSpec:
    footprint = data.get("footprint_class")
    return WorkloadSpec(
        name=str(data.get("name", "workload")),
        regions=[region_from_dict(r) for r in data.get("regions", [])],
        footprint_class=FootprintClass.parse(footprint) if footprint else None,
    )


def scale_demand(spec: WorkloadSpec, factor: float) -> WorkloadSpec:
    """Copy of ``spec`` with every demand multiplied by ``factor``."""
    regions = [
        replace(
            r,
            demand=r.demand * factor,
            phase_schedule=tuple(replace(p, demand=p.demand * factor) for p in r.phase_schedule),
        )
        for r in spec.regions
    ]
    return replace(spec, regions=regions)


# NPB-like profiles

def load_profiles(path: Optional[str] = None) -> Dict[str, Any]:
    if path is None:
        from config import get_config
        path = get_config().PROFILES_PATH
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read profile file {path}: {exc}")
    if data.get("schema_version") != PROFILE_SCHEMA_VERSION:
        raise ConfigError(f"profile file {path}: unsupported schema_version {data.get('schema_version')!r}")
    return data


def hot_read_only_share(read_fraction: float, cold_demand_share: float, cold_rf: float, rw_rf: float) -> float:
    """Share of hot demand that must go to the read-only hot region to hit ``read_fraction``."""
    hot = 1.0 - cold_demand_share
    base = cold_demand_share * cold_rf + hot * rw_rf
    share = (read_fraction - base) / (hot * (1.0 - rw_rf))
    if not 0.0 <= share <= 1.0:
        raise ConfigError(f"read fraction {read_fraction:.4f} is not reachable with this profile shape")
    return share


def npb_profile(name: str, footprint, fast_capacity_pages: int, page_bytes: int = PAGE_SIZE,
                epoch_length: float = 0.01, demand: Optional[float] = None,
                profiles: Optional[Dict[str, Any]] = None) -> WorkloadSpec:
    """Region-structured stand-in for one NPB kernel at a footprint class.

    A cold region (most pages, a small share of demand, random reads) is swept
    once first so it fills FAST; the read-only and read/write hot regions come
    alive afterwards and share the rest of the demand.
    """
    profiles = profiles if profiles is not None else load_profiles()
    table = {k.upper(): v for k, v in profiles.get("profiles", {}).items()}
    key = str(name).upper()
    if key not in table:
        raise ConfigError(f"unknown NPB profile {name!r}; known: {', '.join(sorted(table))}")
    footprint = FootprintClass.parse(footprint)
    defaults = profiles.get("defaults", {})
    entry = {**defaults, **table[key]}

    reads_per_write = float(entry["reads_per_write"])
    target_rf = reads_per_write / (reads_per_write + 1.0)
    cold_pages_share = float(entry.get("cold_page_fraction", 0.8))
    cold_demand_share = 1.0 - float(entry.get("hot_demand_share", 0.8))
    cold_rf = float(entry.get("cold_read_fraction", 1.0))
    rw_rf = float(entry.get("hot_rw_read_fraction", 1.0 / 3.0))
    total_demand = float(demand if demand is not None else entry.get("demand_mbps", 60000.0))
    factor = float(profiles.get("footprints", {}).get(footprint.value, footprint.factor))

    total_pages = max(3, int(round(factor * fast_capacity_pages)))
    cold_pages = int(round(total_pages * cold_pages_share))
    hot_pages = total_pages - cold_pages
    share = hot_read_only_share(target_rf, cold_demand_share, cold_rf, rw_rf)
    ro_pages = min(hot_pages - 1, max(1, int(round(hot_pages * share))))
    rw_pages = hot_pages - ro_pages

    init_k = pages_per_epoch(total_demand, page_bytes, epoch_length)
    warm = int(math.ceil(cold_pages / init_k))
    hot_demand = total_demand * (1.0 - cold_demand_share)

    cold = RegionSpec(
        name="cold", pages=cold_pages, read_fraction=cold_rf, demand=total_demand,
        pattern=Pattern.SEQUENTIAL,
        phase_schedule=(PhaseChange(warm, total_demand * cold_demand_share, cold_rf, True, Pattern.RANDOM),),
    )
    hot_ro = RegionSpec(
        name="hot_ro", pages=ro_pages, read_fraction=1.0, active=False,
        phase_schedule=(PhaseChange(warm, hot_demand * share, 1.0),),
    )
    hot_rw = RegionSpec(
        name="hot_rw", pages=rw_pages, read_fraction=rw_rf, active=False,
        phase_schedule=(PhaseChange(warm, hot_demand * (1.0 - share), rw_rf),),
    )
    return WorkloadSpec(
        name=f"{key}-{footprint.value}",
        regions=[cold, hot_ro, hot_rw],
        footprint_class=footprint,
        meta={"profile": key, "target_read_fraction": target_rf, "warmup_epochs": warm,
              "hot_read_only_share": share},
    )


def aggregate_read_fraction(spec: WorkloadSpec, epoch: int) -> float:
    """Demand-weighted read fraction of the regions active at ``epoch``."""
    num = den = 0.0
    for r in spec.regions:
        demand, rf, active, _ = r.state_at(epoch)
        if active:
            num += demand * rf
            den += demand
    return num / den if den else 1.0


# Traces

class TraceWorkload(Workload):
    """Replays recorded ``epoch pid vaddr reads writes`` tuples verbatim."""

    def __init__(self, name: str, procs: Dict[int, int], records: Dict[int, List[Tuple[int, int, int, int]]],
                 page_size: int = PAGE_SIZE, epoch_length: float = 0.01):
        self.name = name
        self._procs = dict(procs)
        self._records = records
        self.page_size = page_size
        self.epoch_length = epoch_length
        self._first = {}
        offset = 0
        for pid, pages in sorted(self._procs.items()):
            self._first[pid] = offset
            offset += pages

    def processes(self) -> Dict[int, int]:
        return dict(self._procs)

    @property
    def n_epochs(self) -> int:
        return max(self._records) + 1 if self._records else 0

    def batch(self, epoch: int, seed: int = 0, page_bytes: int = PAGE_SIZE, epoch_length: float = 0.01) -> AccessBatch:
        rows = self._records.get(epoch)
        if not rows:
            return AccessBatch.empty(epoch)
        arr = np.array(rows, dtype=np.int64)
        ids = np.array([self._first[p] for p in arr[:, 0]], dtype=np.int64) + arr[:, 1]
        return AccessBatch(epoch, ids, arr[:, 2].copy(), arr[:, 3].copy())


def load_trace(path: str) -> TraceWorkload:
    """Parse a trace file: a magic line, ``page_size``/``epoch_length``/``process`` headers, then tuples."""
    page_size, epoch_length = PAGE_SIZE, 0.01
    procs: Dict[int, int] = {}
    records: Dict[int, List[Tuple[int, int, int, int]]] = {}
    last_epoch = -1
    with open(path) as fh:
        for number, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if number == 1 and line != TRACE_MAGIC:
                    raise TraceFormatError(f"unsupported trace header {line!r}", number)
                continue
            parts = line.split()
            try:
                if parts[0] == "page_size":
                    page_size = int(parts[1])
                elif parts[0] == "epoch_length":
                    epoch_length = float(parts[1])
                elif parts[0] == "process":
                    procs[int(parts[1])] = int(parts[2])
                else:
                    epoch, pid, vaddr, reads, writes = (int(p) for p in parts)
                    if epoch < last_epoch:
                        raise TraceFormatError(f"epoch {epoch} after epoch {last_epoch}", number)
                    if pid not in procs or not 0 <= vaddr < procs[pid]:
                        raise TraceFormatError(f"page ({pid}, {vaddr}) outside declared processes", number)
                    if reads < 0 or writes < 0:
                        raise TraceFormatError("negative access count", number)
                    last_epoch = epoch
                    records.setdefault(epoch, []).append((pid, vaddr, reads, writes))
            except (ValueError, IndexError):
                raise TraceFormatError(f"malformed line {line!r}", number)
    return TraceWorkload(os.path.basename(path), procs, records, page_size, epoch_length)


def export_trace(workload: Workload, path: str, epochs: int, seed: int = 0, page_bytes: int = PAGE_SIZE,
                 epoch_length: float = 0.01) -> str:
    """Write ``epochs`` generated batches in the trace format understood by ``load_trace``."""
    procs = sorted(workload.processes().items())
    owners: List[Tuple[int, int]] = []
    for pid, pages in procs:
        owners.extend((pid, v) for v in range(pages))
    with open(path, "w") as fh:
        fh.write(TRACE_MAGIC + "\n")
        fh.write(f"page_size {page_bytes}\n")
        fh.write(f"epoch_length {epoch_length}\n")
        for pid, pages in procs:
            fh.write(f"process {pid} {pages}\n")
        for batch in iter_batches(workload, epochs, seed, page_bytes, epoch_length):
            for page_id, reads, writes in batch.entries:
                pid, vaddr = owners[page_id]
                fh.write(f"{batch.epoch} {pid} {vaddr} {reads} {writes}\n")
    return path


def iter_batches(workload: Workload, epochs: int, seed: int, page_bytes: int = PAGE_SIZE,
                 epoch_length: float = 0.01) -> Iterable[AccessBatch]:
    for epoch in range(epochs):
        yield workload.batch(epoch, seed, page_bytes, epoch_length)
