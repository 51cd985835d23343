import numpy as np
import pytest

from errors import SelectionProtocolError
from selection import PageClass, PageFindMode, PageFindRequest, classify_bits
from tier_model import TierId
from tests.conftest import advance, clock_oracle, touch


def test_classify_bits():
    classes = classify_bits(np.array([False, True, True]), np.array([False, False, True]))
    assert classes.tolist() == [PageClass.COLD, PageClass.READ_INTENSIVE, PageClass.WRITE_INTENSIVE]


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
@pytest.mark.parametrize("count", [1, 3, 10])
def test_demote_matches_clock_oracle(make_table, selector_for, seed, count):
    n = 12
    table = make_table(n, 4, n)
    table.clear_bits(np.arange(n))
    referenced = np.random.default_rng(seed).random(n) < 0.5
    if referenced.any():
        touch(table, np.flatnonzero(referenced), reads=1)

    reply = selector_for(table).find_demote(count, class_priority=False)
    chosen, cleared = clock_oracle(referenced.tolist(), count)
    assert reply.selected == chosen
    after, _ = table.bits(np.arange(n))
    for i in range(n):
        expected = referenced[i] and i not in cleared
        assert bool(after[i]) == expected


def test_demote_second_pass_continues_after_cursor(make_table, selector_for):
    table = make_table(6, 4, 6)
    table.clear_bits(np.arange(6))
    selector = selector_for(table)
    assert selector.find_demote(2, class_priority=False).selected == [0, 1]
    assert selector.find_demote(2, class_priority=False).selected == [2, 3]


def test_demote_prefers_cold_then_read_then_write(make_table, selector_for):
    table = make_table(4, 4, 4)
    table.clear_bits(np.arange(4))
    table.set_last_class([0, 1, 2, 3], [PageClass.WRITE_INTENSIVE, PageClass.READ_INTENSIVE,
                                        PageClass.COLD, PageClass.COLD])
    reply = selector_for(table).find_demote(2)
    assert reply.selected == [2, 3]
    assert reply.classes == [PageClass.COLD, PageClass.COLD]

    table.set_last_class([0, 1, 2, 3], [PageClass.WRITE_INTENSIVE, PageClass.READ_INTENSIVE,
                                        PageClass.COLD, PageClass.COLD])
    reply = selector_for(table).find_demote(3)
    assert reply.selected == [2, 3, 1]
    assert reply.exhausted


def test_demote_with_every_page_hot_selects_nothing(make_table, selector_for):
    table = make_table(4, 4, 4)
    reply = selector_for(table).find_demote(2)
    assert reply.selected == []
    assert reply.exhausted
    # the sweep gave every page its second chance
    assert not table.bits(np.arange(4))[0].any()


def test_demote_of_never_classified_pages_reports_cold(make_table, selector_for):
    table = make_table(4, 4, 4)
    table.clear_bits(np.arange(4))
    reply = selector_for(table).find_demote(2)
    assert reply.selected == [0, 1]
    assert reply.classes == [PageClass.COLD, PageClass.COLD]


def test_bit_clear_is_idempotent(make_table, selector_for):
    table = make_table(2, 8, 6)
    selector = selector_for(table)
    assert selector.clear_slow_bits() == 4
    first = table.bits(np.arange(6))
    assert selector.clear_slow_bits() == 4
    second = table.bits(np.arange(6))
    assert all((a == b).all() for a, b in zip(first, second))
    assert not first[0][2:].any()
    assert first[0][:2].all()


def test_promotion_requires_clear_and_delay(make_table, selector_for):
    table = make_table(2, 8, 6)
    selector = selector_for(table)
    with pytest.raises(SelectionProtocolError):
        selector.find_promote(1, intensive_only=False, delay_ms=50)
    selector.clear_slow_bits()
    advance(table, 4)
    with pytest.raises(SelectionProtocolError):
        selector.find_promote(1, intensive_only=False, delay_ms=50)
    advance(table, 1)
    assert selector.window_elapsed() == pytest.approx(0.05)
    selector.find_promote(1, intensive_only=False, delay_ms=50)


@pytest.fixture
def slow_mix(make_table, selector_for):
    """Pages 0-3 on FAST, 4-11 on SLOW; after the delay 6 is WRITE, 9 is READ, the rest COLD."""
    table = make_table(4, 16, 12)
    selector = selector_for(table)
    selector.clear_slow_bits()
    touch(table, [6], writes=2)
    touch(table, [9], reads=2)
    advance(table, 5)
    return table, selector


def test_promote_order_write_read_cold(slow_mix):
    _, selector = slow_mix
    reply = selector.find_promote(4, intensive_only=False, delay_ms=50)
    assert reply.selected == [6, 9, 4, 5]
    assert reply.classes == [PageClass.WRITE_INTENSIVE, PageClass.READ_INTENSIVE, PageClass.COLD, PageClass.COLD]
    assert reply.exhausted


def test_intensive_promotion_skips_cold_pages(slow_mix):
    _, selector = slow_mix
    reply = selector.find_promote(5, intensive_only=True, delay_ms=50)
    assert reply.selected == [6, 9]


def test_promotion_stops_early_on_enough_write_pages(slow_mix):
    table, selector = slow_mix
    reply = selector.find_promote(1, intensive_only=True, delay_ms=50)
    assert reply.selected == [6]
    assert not reply.exhausted
    assert reply.cursor.last_vaddr == 6
    # promotion never mutates bits
    assert table.bits([6])[1].all()


def test_count_is_capped(slow_mix, selector_for):
    table, _ = slow_mix
    selector = selector_for(table, cap=1)
    selector.clear_slow_bits()
    advance(table, 5)
    assert len(selector.find_promote(10, intensive_only=False, delay_ms=50)) == 1


def test_switch_truncates_to_available_partners(make_table, selector_for):
    # FAST: 4 cold pages; SLOW: 10 write-intensive pages
    table = make_table(4, 16, 14)
    selector = selector_for(table)
    selector.clear_bits(TierId.FAST)
    selector.clear_slow_bits()
    touch(table, np.arange(4, 14), writes=1)
    advance(table, 5)

    reply = selector.find_switch(10, delay_ms=50)
    assert reply.promote.selected == [4, 5, 6, 7]
    assert reply.demote.selected == [0, 1, 2, 3]
    assert len(reply.promote) == len(reply.demote) == 4

    before = table.occupancy().used
    table.exchange(reply.demote.selected, reply.promote.selected)
    assert table.occupancy().used == before


def test_switch_without_cold_fast_pages_exchanges_nothing(make_table, selector_for):
    table = make_table(2, 8, 4)
    selector = selector_for(table)
    selector.clear_bits(TierId.FAST)
    selector.clear_slow_bits()
    touch(table, [0, 1], reads=1)   # FAST pages are READ
    touch(table, [2], writes=1)     # SLOW WRITE
    touch(table, [3], reads=1)      # SLOW READ
    advance(table, 5)

    reply = selector.find_switch(4, delay_ms=50)
    assert reply.promote.selected == []
    assert reply.demote.selected == []


def test_switch_promotes_write_pages_before_read_pages(make_table, selector_for):
    table = make_table(3, 8, 5)
    selector = selector_for(table)
    selector.clear_bits(TierId.FAST)
    selector.clear_slow_bits()
    touch(table, [0], reads=1)      # FAST READ, never a partner
    touch(table, [3], reads=1)      # SLOW READ
    touch(table, [4], writes=1)     # SLOW WRITE
    advance(table, 5)

    reply = selector.find_switch(4, delay_ms=50)
    assert reply.promote.selected == [4, 3]
    assert reply.promote.classes == [PageClass.WRITE_INTENSIVE, PageClass.READ_INTENSIVE]
    assert reply.demote.selected == [1, 2]
    assert reply.demote.classes == [PageClass.COLD, PageClass.COLD]


def test_execute_logs_page_find_events(slow_mix):
    _, selector = slow_mix
    selector.execute(PageFindRequest(PageFindMode.PROMOTE_INT, 3, delay_ms=50))
    selector.execute(PageFindRequest(PageFindMode.DCPMM_CLEAR))
    events = selector.event_log.events("pagefind")
    assert [e["mode"] for e in events] == ["promote_int", "dcpmm_clear"]
    assert events[0]["selected"] == 2
    assert events[0]["classes"]["WRITE_INTENSIVE"] == 1
    assert events[1]["cleared"] == 8


def test_mode_scopes():
    assert PageFindMode.DEMOTE.scope is TierId.FAST
    assert PageFindMode.PROMOTE.scope is TierId.SLOW
    assert PageFindMode.SWITCH.scope is None


def test_classify_after_delay_maps_every_slow_page(slow_mix):
    _, selector = slow_mix
    classes = selector.classify_after_delay(50)
    assert sorted(classes) == list(range(4, 12))
    assert classes[6] is PageClass.WRITE_INTENSIVE
    assert classes[9] is PageClass.READ_INTENSIVE
    assert classes[4] is PageClass.COLD
