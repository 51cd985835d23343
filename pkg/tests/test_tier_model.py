import os

import pytest

from errors import CalibrationError, ConfigError, NegativeTrafficError, SimulationError, UnknownTierError
from tier_model import (Anchor, BandwidthCounters, TierId, TierPerformanceModel, calibration_from_dict,
                        export_calibration, load_calibration)
from tests.conftest import DATA_DIR, small_calibration_dict


def test_interpolate_hits_anchors_exactly(small_calibration):
    slow = small_calibration.models[TierId.SLOW]
    assert slow.interpolate(1.0, 100) == (350.0, 100.0)
    assert slow.interpolate(0.0, 200) == (900.0, 50.0)


def test_interpolate_is_bilinear_between_anchors(small_calibration):
    slow = small_calibration.models[TierId.SLOW]
    # rows at demand 50: rf=0 -> (450, 25); rf=1 -> (325, 50)
    latency, bandwidth = slow.interpolate(0.5, 50)
    assert latency == pytest.approx(387.5)
    assert bandwidth == pytest.approx(37.5)


def test_past_last_anchor_bandwidth_holds_and_latency_grows(small_calibration):
    slow = small_calibration.models[TierId.SLOW]
    latency, bandwidth = slow.interpolate(1.0, 300)
    assert bandwidth == pytest.approx(150.0)
    assert latency == pytest.approx(650.0)


def test_bandwidth_never_exceeds_demand(small_calibration):
    fast = small_calibration.models[TierId.FAST]
    for demand in (1, 10, 55, 150):
        assert fast.interpolate(1.0, demand)[1] <= demand


def test_decreasing_latency_is_rejected_with_offending_rows():
    data = small_calibration_dict()
    data["tiers"]["SLOW"]["anchors"][2] = [0.0, 200, 500, 50]
    with pytest.raises(CalibrationError) as err:
        calibration_from_dict(data)
    assert any("SLOW" in row and "latency" in row for row in err.value.rows)


def test_bandwidth_above_demand_is_rejected():
    data = small_calibration_dict()
    data["tiers"]["FAST"]["anchors"][1] = [0.0, 100, 100, 140]
    with pytest.raises(CalibrationError):
        calibration_from_dict(data)


def test_incomplete_grid_is_rejected():
    anchors = [Anchor(0.0, 0, 100, 0), Anchor(0.0, 100, 110, 100), Anchor(1.0, 0, 100, 0)]
    with pytest.raises(CalibrationError):
        TierPerformanceModel.from_anchors(anchors, 50)


def test_wrong_schema_version_is_a_config_error():
    data = small_calibration_dict()
    data["schema_version"] = 7
    with pytest.raises(ConfigError):
        calibration_from_dict(data)


def test_service_epoch_with_no_traffic(small_tiers):
    result = small_tiers.service_epoch(TierId.SLOW, 0, 0, 0.01)
    assert result.achieved_bw == 0.0
    assert result.energy == 0.0
    assert result.mean_latency == 300.0


def test_service_epoch_saturated_serves_a_fraction(small_tiers):
    # 200 MB/s of writes against a 50 MB/s write ceiling
    result = small_tiers.service_epoch(TierId.SLOW, 0, 2_000_000, 0.01)
    assert result.offered_bw == pytest.approx(200.0)
    assert result.achieved_bw == pytest.approx(50.0)
    assert result.serviced_fraction == pytest.approx(0.25)
    assert result.energy == pytest.approx(0.25 * 2_000_000 / 64 * 6.0)


def test_service_epoch_rejects_negative_traffic(small_tiers):
    with pytest.raises(NegativeTrafficError):
        small_tiers.service_epoch(TierId.FAST, -1, 0, 0.01)


def test_unknown_tier(small_tiers):
    with pytest.raises(UnknownTierError):
        small_tiers.capacity("HBM")


def test_capacities_follow_page_scale(small_calibration):
    tiers = small_calibration.tier_model(page_scale=1024)
    assert tiers.capacity(TierId.FAST) == 1 * 1024 ** 3 // (4096 * 1024)
    assert tiers.capacity(TierId.SLOW) == 4 * 1024 ** 3 // (4096 * 1024)


def test_counters_sample_averages_over_window():
    counters = BandwidthCounters(0.01)
    counters.record(TierId.SLOW, 1_000_000, 500_000)
    counters.close_epoch()
    counters.close_epoch()
    snap = counters.sample(2)
    assert snap.read_bw[TierId.SLOW] == pytest.approx(50.0)
    assert snap.write_bw[TierId.SLOW] == pytest.approx(25.0)
    assert snap.total_bw(TierId.FAST) == 0.0
    assert not snap.short_window


def test_counters_clamp_short_windows():
    counters = BandwidthCounters(0.01)
    counters.record(TierId.FAST, 1_000_000, 0)
    counters.close_epoch()
    snap = counters.sample(100)
    assert snap.short_window
    assert snap.window_length == 1
    assert snap.read_bw[TierId.FAST] == pytest.approx(100.0)


def test_counters_before_first_epoch():
    with pytest.raises(SimulationError):
        BandwidthCounters(0.01).sample(10)


@pytest.mark.parametrize("window", [0, -3])
def test_counters_reject_empty_windows(window):
    counters = BandwidthCounters(0.01)
    counters.record(TierId.FAST, 1_000_000, 0)
    counters.close_epoch()
    with pytest.raises(ConfigError):
        counters.sample(window)


def test_reset_clears_history():
    counters = BandwidthCounters(0.01)
    counters.record(TierId.FAST, 10, 10)
    counters.close_epoch()
    counters.reset()
    assert counters.elapsed == 0
    assert counters.window_bytes(TierId.FAST, 10) == (0, 0)


def test_shipped_calibration_orders_the_tiers():
    cal = load_calibration(os.path.join(DATA_DIR, "calibration.yaml"))
    fast, slow = cal.models[TierId.FAST], cal.models[TierId.SLOW]
    assert fast.peak(1.0) > slow.peak(1.0)
    assert fast.base_latency < slow.base_latency
    # SLOW writes are the scarce resource
    assert slow.peak(0.0) < slow.peak(1.0) / 4
    assert cal.write_energy[TierId.SLOW] > cal.write_energy[TierId.FAST]


def test_shipped_calibration_keeps_the_loaded_latency_and_peak_ratios():
    cal = load_calibration(os.path.join(DATA_DIR, "calibration.yaml"))
    fast, slow = cal.models[TierId.FAST], cal.models[TierId.SLOW]
    assert slow.peak(1.0) == pytest.approx(0.5 * fast.peak(1.0))
    # at the demand that saturates SLOW reads
    saturating = slow.peak(1.0)
    slow_latency, slow_bw = slow.interpolate(1.0, saturating)
    fast_latency, _ = fast.interpolate(1.0, saturating)
    assert slow_bw == pytest.approx(saturating)
    assert slow_latency >= 11.3 * fast_latency


def test_exported_calibration_loads_back(tmp_path, small_calibration):
    path = str(tmp_path / "cal.yaml")
    export_calibration(small_calibration, path)
    loaded = load_calibration(path)
    assert loaded.models[TierId.SLOW].anchors == small_calibration.models[TierId.SLOW].anchors
    assert loaded.capacity_bytes == small_calibration.capacity_bytes


def test_missing_calibration_file(tmp_path):
    with pytest.raises(ConfigError):
        load_calibration(str(tmp_path / "absent.yaml"))
