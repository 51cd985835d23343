"""Simulated process page tables.

Page state is kept in flat numpy arrays indexed by global page id; the
canonical walk order is ascending (pid, vaddr).
"""
import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import CapacityError, ExchangeError, ResidencyError, UnboundProcessError
from tier_model import CACHELINE, MB, PAGE_SIZE, TIERS, TierId

if TYPE_CHECKING:
    from workload import AccessBatch

logger = logging.getLogger(__name__)

NOT_RESIDENT = -1
NO_CLASS = -1


@dataclass
class Traffic:
    read_bytes: float = 0.0
    write_bytes: float = 0.0

    @property
    def total(self) -> float:
        return self.read_bytes + self.write_bytes

    def add(self, read_bytes: float = 0.0, write_bytes: float = 0.0) -> None:
        self.read_bytes += read_bytes
        self.write_bytes += write_bytes


def zero_traffic() -> Dict[TierId, Traffic]:
    return {t: Traffic() for t in TIERS}


@dataclass(frozen=True)
class PageDescriptor:
    page_id: int
    pid: int
    vaddr: int
    tier: Optional[TierId]
    referenced: bool
    dirty: bool
    truth_reads: int
    truth_writes: int


@dataclass(frozen=True)
class WalkCursor:
    tier: TierId
    last_pid: int = -1
    last_vaddr: int = -1

    @property
    def at_start(self) -> bool:
        return self.last_pid < 0


@dataclass
class TierOccupancy:
    used: Dict[TierId, int]
    capacity: Dict[TierId, int]
    page_scale: int = 1

    def usage(self, tier: TierId) -> float:
        return self.used[tier] / self.capacity[tier]

    def free(self, tier: TierId) -> int:
        return self.capacity[tier] - self.used[tier]


@dataclass
class MigrationReport:
    moved: int = 0
    bytes: int = 0
    cost_epochs: int = 0
    reason: str = ""
    dest: Optional[TierId] = None
    pages: List[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.reason


class PteView:
    """What a walk visitor sees for one page table entry."""

    __slots__ = ("_table", "page_id")

    def __init__(self, table: "PageTable", page_id: int):
        self._table = table
        self.page_id = page_id

    @property
    def pid(self) -> int:
        return int(self._table._pid[self.page_id])

    @property
    def vaddr(self) -> int:
        return int(self._table._vaddr[self.page_id])

    @property
    def tier(self) -> TierId:
        return TierId(int(self._table._tier[self.page_id]))

    @property
    def referenced(self) -> bool:
        return bool(self._table._referenced[self.page_id])

    @referenced.setter
    def referenced(self, value: bool) -> None:
        self._table._referenced[self.page_id] = bool(value)

    @property
    def dirty(self) -> bool:
        return bool(self._table._dirty[self.page_id])

    @dirty.setter
    def dirty(self, value: bool) -> None:
        self._table._dirty[self.page_id] = bool(value)


class WalkSelection:
    """Visitor that collects the pages a predicate selects."""

    def __init__(self, predicate: Callable[[PteView], bool]):
        self.predicate = predicate
        self.selected: List[int] = []
        self.visited = 0

    def __call__(self, pte: PteView) -> None:
        self.visited += 1
        if self.predicate(pte):
            self.selected.append(pte.page_id)


class PageTable:
    """Page tables of every bound process plus tier residency and migration primitives."""

    def __init__(self, capacities: Dict[TierId, int], page_scale: int = 1,
                 epoch_length: float = 0.01, copy_bandwidth: float = 10000.0):
        self.capacity = {TierId.parse(t): int(c) for t, c in capacities.items()}
        self.page_scale = int(page_scale)
        self.page_bytes = PAGE_SIZE * self.page_scale
        self.epoch_length = epoch_length
        self.copy_bandwidth = copy_bandwidth  # MB/s, used only to report cost_epochs
        self.epoch = 0

        self._processes: Dict[int, Tuple[int, int, int]] = {}  # pid -> (first page id, vaddr base, pages)
        self._pid = np.zeros(0, dtype=np.int64)
        self._vaddr = np.zeros(0, dtype=np.int64)
        self._tier = np.zeros(0, dtype=np.int8)
        self._referenced = np.zeros(0, dtype=bool)
        self._dirty = np.zeros(0, dtype=bool)
        self._last_class = np.zeros(0, dtype=np.int8)
        self._truth_reads = np.zeros(0, dtype=np.int64)
        self._truth_writes = np.zeros(0, dtype=np.int64)
        self._order = np.zeros(0, dtype=np.int64)
        self._rank = np.zeros(0, dtype=np.int64)

        self._used = {t: 0 for t in TIERS}
        self._migration = zero_traffic()
        self.migrated_pages = 0

    # Binding and lookup

    @property
    def n_pages(self) -> int:
        return int(self._pid.size)

    def bind_process(self, pid: int, pages: int, vaddr_base: int = 0) -> int:
        """Bind a process owning ``pages`` virtual pages; returns its first global page id."""
        if pid in self._processes:
            raise ResidencyError(f"pid {pid} is already bound")
        first = self.n_pages
        self._processes[pid] = (first, vaddr_base, pages)
        self._pid = np.concatenate([self._pid, np.full(pages, pid, dtype=np.int64)])
        self._vaddr = np.concatenate([self._vaddr, vaddr_base + np.arange(pages, dtype=np.int64)])
        self._tier = np.concatenate([self._tier, np.full(pages, NOT_RESIDENT, dtype=np.int8)])
        self._referenced = np.concatenate([self._referenced, np.zeros(pages, dtype=bool)])
        self._dirty = np.concatenate([self._dirty, np.zeros(pages, dtype=bool)])
        self._last_class = np.concatenate([self._last_class, np.full(pages, NO_CLASS, dtype=np.int8)])
        self._truth_reads = np.concatenate([self._truth_reads, np.zeros(pages, dtype=np.int64)])
        self._truth_writes = np.concatenate([self._truth_writes, np.zeros(pages, dtype=np.int64)])
        self._order = np.lexsort((self._vaddr, self._pid))
        self._rank = np.empty_like(self._order)
        self._rank[self._order] = np.arange(self._order.size)
        return first

    def page_id_of(self, pid: int, vaddr: int) -> int:
        if pid not in self._processes:
            raise UnboundProcessError(f"pid {pid} is not bound")
        first, base, pages = self._processes[pid]
        if not base <= vaddr < base + pages:
            raise UnboundProcessError(f"vaddr {vaddr} is outside pid {pid}'s bound range")
        return first + (vaddr - base)

    def descriptor(self, page_id: int) -> PageDescriptor:
        t = int(self._tier[page_id])
        return PageDescriptor(
            page_id=int(page_id),
            pid=int(self._pid[page_id]),
            vaddr=int(self._vaddr[page_id]),
            tier=None if t == NOT_RESIDENT else TierId(t),
            referenced=bool(self._referenced[page_id]),
            dirty=bool(self._dirty[page_id]),
            truth_reads=int(self._truth_reads[page_id]),
            truth_writes=int(self._truth_writes[page_id]),
        )

    def tier_of(self, page_ids) -> np.ndarray:
        return self._tier[np.asarray(page_ids, dtype=np.int64)]

    def resident(self, tier: TierId) -> np.ndarray:
        """Resident page ids of ``tier`` in canonical order."""
        return self._order[self._tier[self._order] == TierId.parse(tier)]

    def resident_count(self) -> int:
        return int(np.count_nonzero(self._tier != NOT_RESIDENT))

    def occupancy(self) -> TierOccupancy:
        return TierOccupancy(used=dict(self._used), capacity=dict(self.capacity), page_scale=self.page_scale)

    def bits(self, page_ids) -> Tuple[np.ndarray, np.ndarray]:
        ids = np.asarray(page_ids, dtype=np.int64)
        return self._referenced[ids].copy(), self._dirty[ids].copy()

    def truth(self, page_ids) -> Tuple[np.ndarray, np.ndarray]:
        ids = np.asarray(page_ids, dtype=np.int64)
        return self._truth_reads[ids].copy(), self._truth_writes[ids].copy()

    def last_class(self, page_ids) -> np.ndarray:
        return self._last_class[np.asarray(page_ids, dtype=np.int64)].copy()

    def set_last_class(self, page_ids, classes) -> None:
        self._last_class[np.asarray(page_ids, dtype=np.int64)] = classes

    def clear_bits(self, page_ids) -> int:
        ids = np.asarray(page_ids, dtype=np.int64)
        self._referenced[ids] = False
        self._dirty[ids] = False
        return int(ids.size)

    # Allocation

    def allocate(self, pid: int, vaddr: int, policy_hint: TierId = TierId.FAST, write: bool = False) -> PageDescriptor:
        """First touch of (pid, vaddr): place on the hinted tier, else on the other one."""
        page_id = self.page_id_of(pid, vaddr)
        if self._tier[page_id] != NOT_RESIDENT:
            raise ResidencyError(f"page ({pid}, {vaddr}) is already resident")
        self.allocate_many(np.array([page_id]), policy_hint, np.array([write]))
        return self.descriptor(page_id)

    def allocate_many(self, page_ids, policy_hint: TierId = TierId.FAST, write_mask=None) -> np.ndarray:
        """Vectorised first touch in the given order; returns the tier each page landed on."""
        ids = np.asarray(page_ids, dtype=np.int64)
        if ids.size == 0:
            return np.zeros(0, dtype=np.int8)
        writes = np.zeros(ids.size, dtype=bool) if write_mask is None else np.asarray(write_mask, dtype=bool)
        if (self._tier[ids] != NOT_RESIDENT).any():
            raise ResidencyError("allocation of an already resident page")

        hint = TierId.parse(policy_hint)
        free_hint = self.capacity[hint] - self._used[hint]
        free_other = self.capacity[hint.other] - self._used[hint.other]
        if ids.size > free_hint + free_other:
            raise CapacityError(
                f"cannot allocate {ids.size} pages: {free_hint} free on {hint.name}, "
                f"{free_other} free on {hint.other.name}"
            )
        n_hint = min(ids.size, free_hint)
        placed = np.full(ids.size, hint.other, dtype=np.int8)
        placed[:n_hint] = hint
        self._tier[ids] = placed
        self._used[hint] += n_hint
        self._used[hint.other] += ids.size - n_hint
        self._referenced[ids] = True
        self._dirty[ids] = writes
        return placed

    # MMU emulation

    def entry_traffic(self, batch: "AccessBatch") -> Tuple[np.ndarray, np.ndarray]:
        """Per-entry (read_bytes, write_bytes), bounded by one page per touched page per epoch."""
        reads = batch.reads.astype(float)
        writes = batch.writes.astype(float)
        lines = reads + writes
        nbytes = np.minimum(lines * CACHELINE, self.page_bytes)
        with np.errstate(invalid="ignore", divide="ignore"):
            read_bytes = np.where(lines > 0, nbytes * reads / lines, 0.0)
        return read_bytes, nbytes - read_bytes

    def apply_access_batch(self, batch: "AccessBatch") -> Dict[TierId, Traffic]:
        traffic = zero_traffic()
        ids = batch.page_ids
        if ids.size == 0:
            return traffic
        if ids.min() < 0 or ids.max() >= self.n_pages:
            raise UnboundProcessError("access batch references a page of an unbound process")
        tiers = self._tier[ids]
        if (tiers == NOT_RESIDENT).any():
            raise ResidencyError("access batch touches a non-resident page")

        self._referenced[ids] = True
        self._dirty[ids[batch.writes > 0]] = True
        np.add.at(self._truth_reads, ids, batch.reads)
        np.add.at(self._truth_writes, ids, batch.writes)

        read_bytes, write_bytes = self.entry_traffic(batch)
        per_read = np.bincount(tiers, weights=read_bytes, minlength=len(TIERS))
        per_write = np.bincount(tiers, weights=write_bytes, minlength=len(TIERS))
        for t in TIERS:
            traffic[t].add(float(per_read[t]), float(per_write[t]))
        return traffic

    def end_epoch(self) -> None:
        self._truth_reads[:] = 0
        self._truth_writes[:] = 0
        self.epoch += 1

    # Page walks

    def _cursor_at(self, tier: TierId, page_id: int) -> WalkCursor:
        return WalkCursor(tier, int(self._pid[page_id]), int(self._vaddr[page_id]))

    def walk_ids(self, tier: TierId, cursor: WalkCursor, budget: int) -> Tuple[np.ndarray, WalkCursor, bool]:
        """Up to ``budget`` resident ids of ``tier`` after ``cursor`` in canonical order, wrapping.

        Returns (ids, cursor at the last visited id, whether the whole tier was covered).
        """
        if budget <= 0:
            raise ValueError("walk budget must be positive")
        tier = TierId.parse(tier)
        ids = self.resident(tier)
        if ids.size == 0:
            return ids, cursor, True
        if not cursor.at_start:
            rank = self._rank[self.page_id_of(cursor.last_pid, cursor.last_vaddr)]
            start = int(np.searchsorted(self._rank[ids], rank, side="right")) % ids.size
            ids = np.roll(ids, -start)
        exhausted = budget >= ids.size
        ids = ids[:budget]
        return ids, self._cursor_at(tier, int(ids[-1])), exhausted

    def walk(self, tier: TierId, cursor: WalkCursor, visitor: Callable[[PteView], None], budget: int) -> WalkCursor:
        ids, new_cursor, _ = self.walk_ids(tier, cursor, budget)
        for page_id in ids:
            visitor(PteView(self, int(page_id)))
        return new_cursor

    # Migration

    def _charge(self, tier: TierId, read_bytes: float = 0.0, write_bytes: float = 0.0) -> None:
        self._migration[tier].add(read_bytes, write_bytes)

    def drain_migration_traffic(self) -> Dict[TierId, Traffic]:
        pending, self._migration = self._migration, zero_traffic()
        return pending

    def _cost_epochs(self, nbytes: int) -> int:
        per_epoch = self.copy_bandwidth * MB * self.epoch_length
        return int(math.ceil(nbytes / per_epoch)) if nbytes and per_epoch > 0 else 0

    def _check_residency(self, ids: np.ndarray, tier: TierId) -> None:
        if np.unique(ids).size != ids.size:
            raise ResidencyError("duplicate pages in migration request")
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_pages):
            raise UnboundProcessError("migration of a page of an unbound process")
        wrong = ids[self._tier[ids] != tier]
        if wrong.size:
            raise ResidencyError(f"{wrong.size} pages are not resident on {tier.name}")

    def migrate(self, pages: Sequence[int], dest: TierId) -> MigrationReport:
        """Move pages to ``dest``; all or nothing on capacity."""
        dest = TierId.parse(dest)
        ids = np.asarray(pages, dtype=np.int64)
        if ids.size == 0:
            return MigrationReport(dest=dest)
        src = dest.other
        self._check_residency(ids, src)
        free = self.capacity[dest] - self._used[dest]
        if ids.size > free:
            logger.info("migration of %d pages to %s rejected: %d free", ids.size, dest.name, free)
            return MigrationReport(dest=dest, reason=f"destination over capacity ({free} free)")

        self._tier[ids] = dest
        self._used[dest] += ids.size
        self._used[src] -= ids.size
        nbytes = int(ids.size) * self.page_bytes
        self._charge(src, read_bytes=nbytes)
        self._charge(dest, write_bytes=nbytes)
        self.migrated_pages += int(ids.size)
        return MigrationReport(
            moved=int(ids.size), bytes=nbytes, cost_epochs=self._cost_epochs(nbytes),
            dest=dest, pages=ids.tolist(),
        )

    def exchange(self, fast_pages: Sequence[int], slow_pages: Sequence[int]) -> MigrationReport:
        """Swap equal-sized page sets between the tiers; per-tier usage is unchanged."""
        fast_ids = np.asarray(fast_pages, dtype=np.int64)
        slow_ids = np.asarray(slow_pages, dtype=np.int64)
        if fast_ids.size != slow_ids.size:
            raise ExchangeError(f"unequal exchange: {fast_ids.size} FAST vs {slow_ids.size} SLOW pages")
        if fast_ids.size == 0:
            return MigrationReport()
        if np.intersect1d(fast_ids, slow_ids).size:
            raise ExchangeError("exchange lists overlap")
        self._check_residency(fast_ids, TierId.FAST)
        self._check_residency(slow_ids, TierId.SLOW)

        self._tier[fast_ids] = TierId.SLOW
        self._tier[slow_ids] = TierId.FAST
        nbytes = int(fast_ids.size) * self.page_bytes
        for t in TIERS:
            self._charge(t, read_bytes=nbytes, write_bytes=nbytes)
        moved = 2 * int(fast_ids.size)
        self.migrated_pages += moved
        return MigrationReport(
            moved=moved, bytes=2 * nbytes, cost_epochs=self._cost_epochs(2 * nbytes),
            pages=fast_ids.tolist() + slow_ids.tolist(),
        )

    # Export

    def snapshot(self) -> str:
        """One line per resident page: pid vaddr tier R D, in canonical order."""
        lines = ["# pid vaddr tier R D"]
        for page_id in self._order:
            t = self._tier[page_id]
            if t == NOT_RESIDENT:
                continue
            lines.append(
                f"{self._pid[page_id]} {self._vaddr[page_id]} {TierId(int(t)).name} "
                f"{int(self._referenced[page_id])} {int(self._dirty[page_id])}"
            )
        return "\n".join(lines) + "\n"
