import pytest

from errors import ComparisonError, ConfigError
from policies import Policy
from sim_engine import (EpochMetrics, RunSummary, SimConfig, Simulation, average_runs, compare, compare_matrix,
                        geometric_mean, run, spearman)
from tier_model import MB, PAGE_SIZE, TierId
from workload import FootprintClass, Pattern, RegionSpec, TraceWorkload, WorkloadSpec
from tests.conftest import SMALL_CAPACITY


def reads_workload(pages=8, demand=1.0, pattern=Pattern.SEQUENTIAL, read_fraction=1.0):
    return WorkloadSpec("reads", [RegionSpec("a", pages=pages, demand=demand, pattern=pattern,
                                             read_fraction=read_fraction)])


def config(calibration, workload, policy="admdefault", **kwargs):
    kwargs.setdefault("horizon", 50)
    kwargs.setdefault("capacity_bytes", SMALL_CAPACITY)
    return SimConfig(workload=workload, calibration=calibration, policy=policy, **kwargs)


def test_zero_horizon(small_calibration):
    result = run(config(small_calibration, reads_workload(), horizon=0))
    assert result.metrics == []
    assert result.summary.epochs == 0
    assert result.summary.steady_throughput == 0.0
    assert result.summary.tier_signature == "FAST:16,SLOW:64@1"


def test_fitting_workload_runs_entirely_on_fast(small_calibration):
    summary = run(config(small_calibration, reads_workload())).summary
    # 156 cachelines per 10 ms epoch
    assert summary.steady_throughput == pytest.approx(0.9984)
    assert summary.fast_traffic_share == 1.0
    assert summary.migrated_pages == 0
    assert summary.mean_latency == pytest.approx(100.0)
    assert summary.energy_per_access == pytest.approx(1.0)
    assert set(summary.violations.values()) == {0}
    assert summary.region_bw["a"] == pytest.approx(0.9984)


def test_memory_mode_keeps_pages_on_slow_and_serves_hits_from_fast(small_calibration):
    result = run(config(small_calibration, reads_workload(), policy="memm"))
    assert result.metrics[-1].occupancy[TierId.FAST] == 0
    assert result.summary.policy_stats["cache_misses"] == 8
    # the first touch of each page is a miss served by SLOW
    assert 0.0 < result.summary.fast_traffic_share < 1.0


def test_memory_mode_misses_pay_slow_latency(small_calibration):
    # 48 pages thrash a 16-page cache
    workload = reads_workload(pages=48, pattern=Pattern.RANDOM)
    memm = run(config(small_calibration, workload, policy="memm", seed=1)).summary
    assert memm.policy_stats["cache_misses"] > 48
    assert memm.mean_latency > 100.0
    assert memm.region_latency["a"] > 100.0


def test_saturated_tier_builds_a_backlog_without_losing_work(small_calibration):
    capacity = {TierId.FAST: 16 * PAGE_SIZE, TierId.SLOW: 1024 * PAGE_SIZE}
    workload = reads_workload(pages=512, demand=100.0, read_fraction=0.0)
    result = run(config(small_calibration, workload, policy="weighted_interleave",
                        policy_params={"ratio": 0.0}, capacity_bytes=capacity))
    assert result.summary.violations["work_conservation"] == 0
    assert result.metrics[-1].backlog_bytes > 0
    # writes to SLOW top out at 50 MB/s
    assert result.summary.steady_throughput == pytest.approx(50.0)
    assert result.summary.fast_traffic_share == 0.0


def test_backlog_is_capped_and_latency_levels_off(small_calibration):
    capacity = {TierId.FAST: 16 * PAGE_SIZE, TierId.SLOW: 1024 * PAGE_SIZE}
    workload = reads_workload(pages=512, demand=100.0, read_fraction=0.0)
    result = run(config(small_calibration, workload, policy="weighted_interleave",
                        policy_params={"ratio": 0.0}, capacity_bytes=capacity, max_backlog_epochs=4))
    # SLOW peaks at 150 MB/s, so at most 6 MB waits in its queue
    cap = 4 * 150 * MB * 0.01
    assert max(m.backlog_bytes for m in result.metrics) == pytest.approx(cap)
    assert result.summary.throttled_bytes > 0
    assert result.summary.violations["work_conservation"] == 0
    slow_latency = [m.latency[TierId.SLOW] for m in result.metrics[-10:]]
    assert slow_latency == pytest.approx([slow_latency[0]] * 10)


def test_backlog_cap_must_be_positive(small_calibration):
    with pytest.raises(ConfigError):
        run(config(small_calibration, reads_workload(), max_backlog_epochs=0))


def test_runs_are_deterministic(small_calibration):
    workload = reads_workload(pages=24, demand=2.0, pattern=Pattern.RANDOM, read_fraction=0.5)
    first = run(config(small_calibration, workload, policy="hyplacer", horizon=250, seed=3))
    second = run(config(small_calibration, workload, policy="hyplacer", horizon=250, seed=3))
    assert first.event_log.lines() == second.event_log.lines()
    assert [m.csv_row() for m in first.metrics] == [m.csv_row() for m in second.metrics]
    assert first.snapshot == second.snapshot
    assert len(first.event_log.events("decision")) == 2


def test_hyplacer_respects_capacity_and_rate(small_calibration):
    workload = reads_workload(pages=40, demand=2.0, pattern=Pattern.RANDOM, read_fraction=0.5)
    result = run(config(small_calibration, workload, policy="hyplacer", horizon=450))
    assert result.summary.violations["rate_bound"] == 0
    assert result.summary.violations["page_conservation"] == 0
    assert max(m.occupancy[TierId.FAST] for m in result.metrics) <= 16
    assert sum(v for k, v in result.summary.policy_stats.items() if k.startswith("decisions_")) == 4


class DemoteFirstPage(Policy):
    name = "demote_first_page"

    def tick(self, ctx):
        if ctx.epoch != 3:
            return []
        return [ctx.table.migrate([0], TierId.SLOW)]


def test_migration_traffic_is_charged_in_its_own_epoch(small_calibration):
    sim = Simulation(config(small_calibration, reads_workload(), horizon=6), policy=DemoteFirstPage())
    metrics = sim.run().metrics
    assert [m.migrated_pages for m in metrics] == [0, 0, 0, 1, 0, 0]
    assert metrics[2].offered_bw[TierId.SLOW] == 0.0
    # the demoted page is written to SLOW in the same epoch
    assert metrics[3].offered_bw[TierId.SLOW] * MB * 0.01 >= PAGE_SIZE
    assert metrics[3].migrated_bytes == PAGE_SIZE


def test_metrics_rows_match_header(small_calibration):
    result = run(config(small_calibration, reads_workload(), horizon=3))
    assert len(result.metrics[0].csv_row().split(",")) == len(EpochMetrics.CSV_HEADER.split(","))


def test_trace_workloads_replay(small_calibration):
    trace = TraceWorkload("t", {0: 4}, {0: [(0, 0, 10, 0), (0, 1, 0, 10)], 2: [(0, 0, 5, 5)]})
    result = run(config(small_calibration, trace, horizon=4))
    assert [m.app_bw > 0 for m in result.metrics] == [True, False, True, False]
    assert result.snapshot.count("FAST") == 2


def test_delay_must_be_a_whole_number_of_epochs(small_calibration):
    with pytest.raises(ConfigError):
        Simulation(config(small_calibration, reads_workload(), policy="hyplacer",
                          policy_params={"delay_ms": 55}))


def test_delay_must_fit_in_the_control_period(small_calibration):
    with pytest.raises(ConfigError):
        Simulation(config(small_calibration, reads_workload(), policy="hyplacer",
                          policy_params={"control_period": 5}))


def test_footprint_class_is_checked_against_fast(small_calibration):
    workload = WorkloadSpec("big", [RegionSpec("a", pages=16)], footprint_class=FootprintClass.LARGE)
    with pytest.raises(ConfigError):
        Simulation(config(small_calibration, workload))


def test_invalid_sim_config(small_calibration):
    with pytest.raises(ConfigError):
        Simulation(config(small_calibration, reads_workload(), horizon=-1))


# Comparison


def summary(policy, throughput, energy=1.0, workload="w", signature="sig"):
    return RunSummary(name=f"{workload}/{policy}", policy=policy, workload=workload, seed=0, epochs=10,
                      steady_throughput=throughput, energy_per_access=energy, tier_signature=signature)


def test_baseline_compares_to_exactly_one(small_calibration):
    workload = reads_workload()
    runs = [run(config(small_calibration, workload, policy=p, policy_params=params)).summary
            for p, params in (("admdefault", {}), ("weighted_interleave", {"ratio": 0.5}))]
    rows = {r.policy: r for r in compare(runs, "admdefault")}
    assert rows["admdefault"].speedup == 1.0
    assert rows["admdefault"].energy_ratio == 1.0
    # half the traffic pays SLOW's higher access energy
    assert rows["weighted_interleave"].energy_ratio > 1.0


def test_compare_rejects_mismatched_runs():
    with pytest.raises(ComparisonError):
        compare([summary("admdefault", 10.0), summary("hyplacer", 12.0, workload="other")])
    with pytest.raises(ComparisonError):
        compare([summary("admdefault", 10.0), summary("hyplacer", 12.0, signature="other")])
    with pytest.raises(ComparisonError):
        compare([summary("hyplacer", 12.0)], baseline="admdefault")
    with pytest.raises(ComparisonError):
        compare([summary("admdefault", 0.0), summary("hyplacer", 12.0)])


def test_geometric_mean():
    assert geometric_mean([2.0, 8.0]) == pytest.approx(4.0)
    assert geometric_mean([]) == 0.0
    with pytest.raises(ComparisonError):
        geometric_mean([1.0, 0.0])


def test_compare_matrix_geomean_per_policy():
    runs = [summary("base", 10.0, workload="w1"), summary("x", 20.0, workload="w1"),
            summary("base", 10.0, workload="w2"), summary("x", 80.0, workload="w2")]
    matrix = compare_matrix(runs, "base")
    assert matrix["geomean"]["x"] == pytest.approx(4.0)
    assert matrix["geomean"]["base"] == 1.0
    assert matrix["energy_speedup_spearman"] is None
    assert [r.workload for r in matrix["rows"]] == ["w1", "w1", "w2", "w2"]


def test_spearman_rank_correlation():
    assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([1, 1, 1], [1, 2, 3]) is None


def test_average_runs_keeps_the_range():
    averaged = average_runs([summary("x", 10.0), summary("x", 14.0), summary("x", 12.0)])
    assert averaged.steady_throughput == pytest.approx(12.0)
    assert averaged.throughput_range == pytest.approx(4.0)
    assert averaged.seeds == 3
