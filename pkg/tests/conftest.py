import os

import numpy as np
import pytest

from config import ROOT_DIR
from event_log import EventLog
from page_system import PageTable
from selection import Selector
from tier_model import PAGE_SIZE, BandwidthCounters, TierId, calibration_from_dict
from workload import AccessBatch

DATA_DIR = os.path.join(ROOT_DIR, "data")
EXPERIMENTS_DIR = os.path.join(ROOT_DIR, "experiments")

SMALL_CAPACITY = {TierId.FAST: 16 * PAGE_SIZE, TierId.SLOW: 64 * PAGE_SIZE}


def small_calibration_dict():
    """Two-point mix, three-point demand grid; FAST never saturates below 200 MB/s."""
    return {
        "schema_version": 1,
        "max_offered_demand_mbps": 200,
        "tiers": {
            "FAST": {
                "capacity_gib": 1,
                "read_energy_nj": 1.0,
                "write_energy_nj": 1.0,
                "divergence_knee_mbps": 150,
                "anchors": [
                    [0.0, 0, 100, 0], [0.0, 100, 100, 100], [0.0, 200, 120, 200],
                    [1.0, 0, 100, 0], [1.0, 100, 100, 100], [1.0, 200, 120, 200],
                ],
            },
            "SLOW": {
                "capacity_gib": 4,
                "read_energy_nj": 2.0,
                "write_energy_nj": 6.0,
                "divergence_knee_mbps": 50,
                "anchors": [
                    [0.0, 0, 300, 0], [0.0, 100, 600, 50], [0.0, 200, 900, 50],
                    [1.0, 0, 300, 0], [1.0, 100, 350, 100], [1.0, 200, 500, 150],
                ],
            },
        },
    }


@pytest.fixture
def small_calibration():
    return calibration_from_dict(small_calibration_dict(), source="test")


@pytest.fixture
def small_tiers(small_calibration):
    return small_calibration.tier_model(1, SMALL_CAPACITY)


def touch(table, page_ids, reads=0, writes=0):
    """Apply one batch that reads/writes every page in ``page_ids``."""
    ids = np.asarray(page_ids, dtype=np.int64)
    batch = AccessBatch(
        table.epoch, ids,
        np.full(ids.size, reads, dtype=np.int64),
        np.full(ids.size, writes, dtype=np.int64),
    )
    return table.apply_access_batch(batch)


def advance(table, epochs):
    for _ in range(epochs):
        table.end_epoch()


def clock_oracle(referenced, count):
    """Reference CLOCK from the walk start: (chosen ids, ids whose bits get cleared)."""
    candidates = [i for i, ref in enumerate(referenced) if not ref]
    chosen = candidates[:count]
    end = chosen[-1] + 1 if len(chosen) == count and count else len(referenced)
    cleared = [i for i in range(end) if referenced[i]]
    return chosen, cleared


@pytest.fixture
def make_table():
    """PageTable with one process of ``pages`` pages; ``fast`` of them first-touched on FAST."""

    def _make(fast_capacity, slow_capacity, pages, fast=None):
        table = PageTable({TierId.FAST: fast_capacity, TierId.SLOW: slow_capacity})
        table.bind_process(0, pages)
        fast = min(pages, fast_capacity) if fast is None else fast
        if fast:
            table.allocate_many(np.arange(fast), TierId.FAST)
        if pages > fast:
            table.allocate_many(np.arange(fast, pages), TierId.SLOW)
        return table

    return _make


@pytest.fixture
def selector_for():
    def _selector(table, cap=None):
        return Selector(table, epoch_length=0.01, cap=cap, event_log=EventLog())

    return _selector


@pytest.fixture
def counters():
    return BandwidthCounters(0.01)
