"""Shipped experiments reproduce the expected orderings. Run with ``pytest -m acceptance``."""
import os

import numpy as np
import pytest

from harness import load_experiment, run_experiment, sweep_ratio
from selection import PageClass
from tests.conftest import EXPERIMENTS_DIR, clock_oracle, touch

pytestmark = pytest.mark.acceptance


def experiment(name, workloads=None):
    exp = load_experiment(os.path.join(EXPERIMENTS_DIR, f"{name}.exp"))
    if workloads is not None:
        exp.workloads = [w for w in exp.workloads if w.get("name", w.get("npb")) in workloads]
    return exp


def speedups(result):
    return {(r.workload, r.policy): r.speedup for r in result.comparison}


def summaries(result):
    return {(o.cell.workload, o.cell.policy): o.summary for o in result.outcomes}


def assert_conserved(result):
    assert not result.aborted
    for o in result.outcomes:
        assert set(o.summary.violations.values()) == {0}, o.cell.cell_id


def test_rw_partitioning_pays_slow_latency_on_read_only_pages():
    result = run_experiment(experiment("observation1"))
    assert_conserved(result)
    runs = summaries(result)
    partitioned, fillfirst = runs[("obs1", "partitioned")], runs[("obs1", "fillfirst_lru")]
    assert partitioned.region_latency["ro"] >= 5 * fillfirst.region_latency["ro"]
    assert partitioned.region_bw["ro"] <= 0.6 * fillfirst.region_bw["ro"]
    assert speedups(result)[("obs1", "partitioned")] < 1.0


def test_rw_awareness_pays_off_only_under_high_demand():
    result = run_experiment(experiment("observation2"))
    assert_conserved(result)
    ratios = speedups(result)
    assert ratios[("obs2-high", "hyplacer")] >= 1.10
    assert ratios[("obs2-low", "hyplacer")] == pytest.approx(1.0, abs=0.05)


def test_interleave_gain_is_modest():
    levels = sweep_ratio(experiment("observation3"), demands=[10000, 90000])
    low, high = levels
    assert low.best.ratio == 1.0
    assert 1.0 <= high.gain <= 1.15


def test_hyplacer_leads_the_npb_matrix():
    exp = experiment("npb_matrix")
    exp.workloads = [w for w in exp.workloads if w["footprint"] in ("MEDIUM", "LARGE")]
    exp.policies = [p for p in exp.policies if p[0] != "memm"]
    result = run_experiment(exp)
    assert_conserved(result)
    geomean = result.geomean
    assert geomean["hyplacer"] > geomean["fillfirst_lru"]
    assert geomean["hyplacer"] > geomean["bwbalance"]
    assert geomean["hyplacer"] > geomean["partitioned"]
    assert geomean["hyplacer"] >= 1.5


def test_hyplacer_costs_little_on_small_footprints():
    result = run_experiment(experiment("overhead_small"))
    assert_conserved(result)
    for (workload, policy), speedup in speedups(result).items():
        if policy == "hyplacer":
            assert speedup >= 0.90, workload
    bt = summaries(result)[("BT-SMALL", "hyplacer")]
    assert bt.migrated_pages == 0


def test_selection_agrees_with_reference_on_random_sequences(make_table, selector_for):
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 65))

        # CLOCK demotion over bits accumulated across a few epochs
        table = make_table(n, 4, n)
        table.clear_bits(np.arange(n))
        referenced = np.zeros(n, dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            hit = np.flatnonzero(rng.random(n) < 0.4)
            if hit.size:
                touch(table, hit, reads=1)
                referenced[hit] = True
            table.end_epoch()
        count = int(rng.integers(1, n + 1))
        reply = selector_for(table).find_demote(count, class_priority=False)
        chosen, cleared = clock_oracle(referenced.tolist(), count)
        assert reply.selected == chosen, seed
        after, _ = table.bits(np.arange(n))
        assert after.tolist() == [bool(referenced[i]) and i not in cleared for i in range(n)], seed

        # delay-window classification against the ground-truth counters
        table = make_table(1, 64, n, fast=0)
        selector = selector_for(table)
        selector.clear_slow_bits()
        reads = np.zeros(n, dtype=np.int64)
        writes = np.zeros(n, dtype=np.int64)
        for _ in range(5):
            draw = rng.random(n)
            readers, writers = np.flatnonzero(draw < 0.3), np.flatnonzero(draw > 0.85)
            if readers.size:
                touch(table, readers, reads=1)
            if writers.size:
                touch(table, writers, writes=1)
            r, w = table.truth(np.arange(n))
            reads += r
            writes += w
            table.end_epoch()
        expected = {
            i: PageClass.WRITE_INTENSIVE if writes[i] else PageClass.READ_INTENSIVE if reads[i] else PageClass.COLD
            for i in range(n)
        }
        assert selector.classify_after_delay(50) == expected, seed
