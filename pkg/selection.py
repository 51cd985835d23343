"""Page selection over the simulated page tables.

Demotion is CLOCK-based over FAST. Promotion classifies SLOW pages from the
R/D bits accumulated during a delay window that starts with a bit clear.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, List, Optional

import numpy as np

from errors import SelectionProtocolError
from event_log import EventLog
from page_system import NO_CLASS, PageTable, WalkCursor
from tier_model import TIERS, TierId

logger = logging.getLogger(__name__)

# Tolerance when comparing elapsed epochs against a delay in ms.
_DELAY_EPS = 1e-9


class PageFindMode(Enum):
    DEMOTE = "demote"
    PROMOTE = "promote"
    PROMOTE_INT = "promote_int"
    SWITCH = "switch"
    DCPMM_CLEAR = "dcpmm_clear"

    @property
    def scope(self) -> Optional[TierId]:
        if self is PageFindMode.DEMOTE:
            return TierId.FAST
        if self is PageFindMode.SWITCH:
            return None
        return TierId.SLOW


class PageClass(IntEnum):
    COLD = 0
    READ_INTENSIVE = 1
    WRITE_INTENSIVE = 2


def classify_bits(referenced: np.ndarray, dirty: np.ndarray) -> np.ndarray:
    """dirty -> WRITE, referenced and clean -> READ, otherwise COLD."""
    return np.where(dirty, PageClass.WRITE_INTENSIVE,
                    np.where(referenced, PageClass.READ_INTENSIVE, PageClass.COLD)).astype(np.int8)


@dataclass
class PageFindRequest:
    mode: PageFindMode
    count: int = 0
    delay_ms: float = 0.0


@dataclass
class PageFindReply:
    selected: List[int] = field(default_factory=list)
    classes: List[PageClass] = field(default_factory=list)
    exhausted: bool = False
    cursor: Optional[WalkCursor] = None
    cleared: int = 0

    def __len__(self) -> int:
        return len(self.selected)

    def histogram(self) -> Dict[str, int]:
        hist = {c.name: 0 for c in PageClass}
        for c in self.classes:
            hist[PageClass(c).name] += 1
        return hist


@dataclass
class SwitchReply:
    promote: PageFindReply
    demote: PageFindReply

    def __len__(self) -> int:
        return len(self.promote)


class Selector:
    """Executes page-find requests against a PageTable, one at a time."""

    def __init__(self, table: PageTable, epoch_length: float = 0.01, cap: Optional[int] = None,
                 event_log: Optional[EventLog] = None):
        self.table = table
        self.epoch_length = epoch_length
        self.cap = cap
        self.event_log = event_log
        self.cursors: Dict[TierId, WalkCursor] = {t: WalkCursor(t) for t in TIERS}
        self._cleared_at: Dict[TierId, Optional[int]] = {t: None for t in TIERS}

    def _capped(self, count: int) -> int:
        if self.cap is not None and count > self.cap:
            logger.debug("page-find count %d capped to %d", count, self.cap)
            return self.cap
        return max(0, int(count))

    def _lap(self, tier: TierId) -> np.ndarray:
        """Every resident page of ``tier`` in walk order from its cursor."""
        n = self.table.occupancy().used[tier]
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        ids, _, _ = self.table.walk_ids(tier, self.cursors[tier], n)
        return ids

    def _advance(self, tier: TierId, page_id: int) -> WalkCursor:
        d = self.table.descriptor(page_id)
        self.cursors[tier] = WalkCursor(tier, d.pid, d.vaddr)
        return self.cursors[tier]

    # DCPMM bit clear and delay-window classification

    def clear_bits(self, tier: TierId) -> int:
        """Clear R/D bits of every page resident on ``tier`` and open a delay window."""
        tier = TierId.parse(tier)
        cleared = self.table.clear_bits(self.table.resident(tier))
        self._cleared_at[tier] = self.table.epoch
        return cleared

    def clear_slow_bits(self) -> int:
        return self.clear_bits(TierId.SLOW)

    def window_elapsed(self, tier: TierId = TierId.SLOW) -> Optional[float]:
        """Simulated seconds since the last clear of ``tier``, or None if never cleared."""
        cleared = self._cleared_at[TierId.parse(tier)]
        if cleared is None:
            return None
        return (self.table.epoch - cleared) * self.epoch_length

    def _check_window(self, tier: TierId, delay_ms: float) -> None:
        elapsed = self.window_elapsed(tier)
        if elapsed is None:
            raise SelectionProtocolError(f"{tier.name} classification requested without a preceding bit clear")
        if elapsed + _DELAY_EPS < delay_ms / 1000.0:
            raise SelectionProtocolError(
                f"{tier.name} classification after {elapsed * 1000:.1f} ms, delay is {delay_ms:.1f} ms"
            )

    def classify_after_delay(self, delay_ms: float, tier: TierId = TierId.SLOW) -> Dict[int, PageClass]:
        tier = TierId.parse(tier)
        self._check_window(tier, delay_ms)
        ids = self.table.resident(tier)
        classes = classify_bits(*self.table.bits(ids))
        return {int(p): PageClass(int(c)) for p, c in zip(ids, classes)}

    # Demotion

    def find_demote(self, count: int, class_priority: bool = True) -> PageFindReply:
        """CLOCK over FAST: unreferenced pages are candidates, the rest get a second chance.

        With ``class_priority`` candidates are preferred by the class recorded when
        their bits were last cleared: COLD, then READ, then WRITE.
        """
        count = self._capped(count)
        ids = self._lap(TierId.FAST)
        if ids.size == 0 or count == 0:
            return PageFindReply(exhausted=ids.size == 0, cursor=self.cursors[TierId.FAST])

        referenced, dirty = self.table.bits(ids)
        candidate = ~referenced
        priority = self.table.last_class(ids)
        priority[priority == NO_CLASS] = PageClass.COLD

        stop = candidate & (priority == PageClass.COLD) if class_priority else candidate
        stops = np.flatnonzero(stop)
        if stops.size >= count:
            end, exhausted = int(stops[count - 1]) + 1, False
        else:
            end, exhausted = ids.size, True

        visited = ids[:end]
        cand_ids = visited[candidate[:end]]
        if class_priority:
            order = np.argsort(priority[:end][candidate[:end]], kind="stable")
            chosen = cand_ids[order][:count]
        else:
            chosen = cand_ids[:count]

        keep = ~np.isin(visited, chosen)
        unselected = visited[keep]
        self.table.set_last_class(unselected, classify_bits(referenced[:end][keep], dirty[:end][keep]))
        self.table.clear_bits(unselected)

        raw = self.table.last_class(chosen)
        raw[raw == NO_CLASS] = PageClass.COLD
        chosen_classes = [PageClass(int(c)) for c in raw]
        cursor = self._advance(TierId.FAST, int(visited[-1]))
        return PageFindReply(selected=chosen.tolist(), classes=chosen_classes, exhausted=exhausted, cursor=cursor)

    # Promotion

    def _slow_walk(self, delay_ms: float):
        self._check_window(TierId.SLOW, delay_ms)
        ids = self._lap(TierId.SLOW)
        return ids, classify_bits(*self.table.bits(ids))

    def find_promote(self, count: int, intensive_only: bool, delay_ms: float = 0.0) -> PageFindReply:
        """Walk SLOW choosing WRITE, then READ, then (unless ``intensive_only``) COLD pages.

        Reads bits only; never mutates them.
        """
        count = self._capped(count)
        ids, classes = self._slow_walk(delay_ms)
        if ids.size == 0 or count == 0:
            return PageFindReply(exhausted=ids.size == 0, cursor=self.cursors[TierId.SLOW])

        writes = np.flatnonzero(classes == PageClass.WRITE_INTENSIVE)
        if writes.size >= count:
            positions, exhausted = writes[:count], False
        else:
            wanted = [PageClass.WRITE_INTENSIVE, PageClass.READ_INTENSIVE]
            if not intensive_only:
                wanted.append(PageClass.COLD)
            positions = np.concatenate([np.flatnonzero(classes == c) for c in wanted])[:count]
            exhausted = True

        if positions.size == 0:
            return PageFindReply(exhausted=exhausted, cursor=self.cursors[TierId.SLOW])
        cursor = self._advance(TierId.SLOW, int(ids[positions.max()]))
        return PageFindReply(
            selected=ids[positions].tolist(),
            classes=[PageClass(int(c)) for c in classes[positions]],
            exhausted=exhausted,
            cursor=cursor,
        )

    def find_switch(self, count: int, delay_ms: float = 0.0) -> SwitchReply:
        """Pair intensive SLOW pages with COLD FAST pages.

        SLOW WRITE pages go first, then SLOW READ pages. Both lists are cut to
        the shorter one so they always have the same length.
        """
        count = self._capped(count)
        slow_ids, slow_classes = self._slow_walk(delay_ms)
        fast_ids = self._lap(TierId.FAST)
        if count == 0 or slow_ids.size == 0 or fast_ids.size == 0:
            empty = PageFindReply(exhausted=True)
            return SwitchReply(promote=empty, demote=PageFindReply(exhausted=True))

        f_ref, f_dirty = self.table.bits(fast_ids)
        fast_classes = classify_bits(f_ref, f_dirty)
        s_write = np.flatnonzero(slow_classes == PageClass.WRITE_INTENSIVE)
        s_read = np.flatnonzero(slow_classes == PageClass.READ_INTENSIVE)
        f_cold = np.flatnonzero(fast_classes == PageClass.COLD)
        intensive = np.concatenate([s_write, s_read])
        k = min(count, intensive.size, f_cold.size)
        slow_pos = intensive[:k].astype(np.int64)
        fast_pos = f_cold[:k].astype(np.int64)

        # the FAST side behaves like a demotion walk up to its last chosen page
        end = int(fast_pos.max()) + 1 if fast_pos.size else fast_ids.size
        visited = fast_ids[:end]
        keep = ~np.isin(visited, fast_ids[fast_pos])
        self.table.set_last_class(visited[keep], fast_classes[:end][keep])
        self.table.clear_bits(visited[keep])
        self._advance(TierId.FAST, int(visited[-1]))
        if slow_pos.size:
            self._advance(TierId.SLOW, int(slow_ids[slow_pos.max()]))

        promote = PageFindReply(
            selected=slow_ids[slow_pos].tolist(),
            classes=[PageClass(int(c)) for c in slow_classes[slow_pos]],
            exhausted=slow_pos.size < count,
            cursor=self.cursors[TierId.SLOW],
        )
        demote = PageFindReply(
            selected=fast_ids[fast_pos].tolist(),
            classes=[PageClass(int(c)) for c in fast_classes[fast_pos]],
            exhausted=fast_pos.size < count,
            cursor=self.cursors[TierId.FAST],
        )
        return SwitchReply(promote=promote, demote=demote)

    # Dispatcher

    def execute(self, request: PageFindRequest):
        mode = request.mode
        if mode is PageFindMode.DCPMM_CLEAR:
            reply = PageFindReply(cleared=self.clear_slow_bits(), exhausted=True, cursor=self.cursors[TierId.SLOW])
            self._log(request, reply)
            return reply
        if mode is PageFindMode.DEMOTE:
            reply = self.find_demote(request.count)
        elif mode is PageFindMode.PROMOTE:
            reply = self.find_promote(request.count, intensive_only=False, delay_ms=request.delay_ms)
        elif mode is PageFindMode.PROMOTE_INT:
            reply = self.find_promote(request.count, intensive_only=True, delay_ms=request.delay_ms)
        else:
            reply = self.find_switch(request.count, delay_ms=request.delay_ms)
            self._log(request, reply.promote, side="promote")
            self._log(request, reply.demote, side="demote")
            return reply
        self._log(request, reply)
        return reply

    def _log(self, request: PageFindRequest, reply: PageFindReply, side: str = "") -> None:
        if self.event_log is None:
            return
        fields = {"mode": request.mode.value, "count": request.count}
        if side:
            fields["side"] = side
        if request.mode is PageFindMode.DCPMM_CLEAR:
            fields["cleared"] = reply.cleared
        else:
            fields["selected"] = len(reply)
            fields["classes"] = reply.histogram()
            fields["exhausted"] = reply.exhausted
        if reply.cursor is not None and not reply.cursor.at_start:
            fields["cursor"] = f"{reply.cursor.tier.name}:{reply.cursor.last_pid}:{reply.cursor.last_vaddr}"
        self.event_log.record(self.table.epoch, "pagefind", **fields)
