"""Two-tier memory model: capacities, load/mix dependent performance surfaces
and the bandwidth counters the placement policies read."""
import logging
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from errors import CalibrationError, ConfigError, NegativeTrafficError, SimulationError, UnknownTierError

logger = logging.getLogger(__name__)

PAGE_SIZE = 4096
CACHELINE = 64
MB = 1_000_000
GIB = 1024 ** 3
CALIBRATION_SCHEMA_VERSION = 1


class TierId(IntEnum):
    FAST = 0  # DRAM
    SLOW = 1  # DCPMM

    @classmethod
    def parse(cls, value) -> "TierId":
        if isinstance(value, TierId):
            return value
        try:
            if isinstance(value, str):
                return cls[value.strip().upper()]
            return cls(int(value))
        except (KeyError, ValueError):
            raise UnknownTierError(f"Unknown tier: {value!r}")

    @property
    def other(self) -> "TierId":
        return TierId.SLOW if self is TierId.FAST else TierId.FAST


TIERS = (TierId.FAST, TierId.SLOW)


@dataclass(frozen=True)
class Anchor:
    read_fraction: float
    offered_demand: float  # MB/s
    latency: float  # ns
    achieved_bandwidth: float  # MB/s


class TierPerformanceModel:
    """Latency/bandwidth surface over a (read_fraction x offered_demand) anchor grid.

    Evaluation is bilinear. Past the last demand anchor, bandwidth stays at
    the row's peak and latency keeps growing along the last segment.
    """

    def __init__(self, read_fractions: Sequence[float], demands: Sequence[float],
                 latency: np.ndarray, bandwidth: np.ndarray, divergence_knee: float):
        self.read_fractions = np.asarray(read_fractions, dtype=float)
        self.demands = np.asarray(demands, dtype=float)
        self.latency = np.asarray(latency, dtype=float)
        self.bandwidth = np.asarray(bandwidth, dtype=float)
        self.divergence_knee = float(divergence_knee)

        shape = (len(self.read_fractions), len(self.demands))
        if self.latency.shape != shape or self.bandwidth.shape != shape:
            raise CalibrationError(f"Anchor grid must be {shape[0]}x{shape[1]}")
        if len(self.demands) < 2:
            raise CalibrationError("Need at least two demand anchors per read fraction")
        if np.any(np.diff(self.read_fractions) <= 0) or np.any(np.diff(self.demands) <= 0):
            raise CalibrationError("Anchor axes must be strictly increasing")

    @classmethod
    def from_anchors(cls, anchors: Sequence[Anchor], divergence_knee: float) -> "TierPerformanceModel":
        """Build the grid from a flat anchor list; every read fraction needs the same demand points."""
        fractions = sorted({round(a.read_fraction, 6) for a in anchors})
        demands = sorted({float(a.offered_demand) for a in anchors})
        latency = np.full((len(fractions), len(demands)), np.nan)
        bandwidth = np.full_like(latency, np.nan)
        for a in anchors:
            i = fractions.index(round(a.read_fraction, 6))
            j = demands.index(float(a.offered_demand))
            latency[i, j] = a.latency
            bandwidth[i, j] = a.achieved_bandwidth
        if np.isnan(latency).any():
            missing = [
                f"read_fraction={fractions[i]} demand={demands[j]}"
                for i, j in zip(*np.where(np.isnan(latency)))
            ]
            raise CalibrationError("Incomplete anchor grid", missing)
        return cls(fractions, demands, latency, bandwidth, divergence_knee)

    @property
    def anchors(self) -> List[Anchor]:
        return [
            Anchor(float(rf), float(d), float(self.latency[i, j]), float(self.bandwidth[i, j]))
            for i, rf in enumerate(self.read_fractions)
            for j, d in enumerate(self.demands)
        ]

    @property
    def base_latency(self) -> float:
        return float(self.latency[-1, 0])

    @property
    def peak_read_bw(self) -> float:
        return float(self.bandwidth[-1].max())

    @property
    def peak_write_limited_bw(self) -> float:
        return float(self.bandwidth[0].max())

    def validate(self) -> List[str]:
        """Return a description of every anchor that breaks the surface invariants."""
        problems = []
        for i, rf in enumerate(self.read_fractions):
            for j in range(1, len(self.demands)):
                if self.latency[i, j] < self.latency[i, j - 1]:
                    problems.append(
                        f"read_fraction={rf:g} demand={self.demands[j]:g}: latency "
                        f"{self.latency[i, j]:g} < {self.latency[i, j - 1]:g}"
                    )
                if self.bandwidth[i, j] < self.bandwidth[i, j - 1]:
                    problems.append(
                        f"read_fraction={rf:g} demand={self.demands[j]:g}: bandwidth decreases"
                    )
            for j, d in enumerate(self.demands):
                if self.bandwidth[i, j] > d + 1e-9:
                    problems.append(
                        f"read_fraction={rf:g} demand={d:g}: bandwidth {self.bandwidth[i, j]:g} exceeds demand"
                    )
                if self.latency[i, j] <= 0:
                    problems.append(f"read_fraction={rf:g} demand={d:g}: non-positive latency")
        return problems

    def _row(self, i: int, demand: float) -> Tuple[float, float]:
        d = self.demands
        if demand <= d[-1]:
            lat = float(np.interp(demand, d, self.latency[i]))
        else:
            slope = (self.latency[i, -1] - self.latency[i, -2]) / (d[-1] - d[-2])
            lat = float(self.latency[i, -1] + slope * (demand - d[-1]))
        bw = float(np.interp(demand, d, self.bandwidth[i]))
        return lat, bw

    def interpolate(self, read_fraction: float, demand: float) -> Tuple[float, float]:
        """(latency ns, achieved bandwidth MB/s) at the given mix and offered demand."""
        rf = min(max(read_fraction, self.read_fractions[0]), self.read_fractions[-1])
        hi = int(np.searchsorted(self.read_fractions, rf, side="left"))
        if hi == 0 or self.read_fractions[hi] == rf:
            lat, bw = self._row(hi, demand)
        else:
            lo = hi - 1
            w = (rf - self.read_fractions[lo]) / (self.read_fractions[hi] - self.read_fractions[lo])
            lat_lo, bw_lo = self._row(lo, demand)
            lat_hi, bw_hi = self._row(hi, demand)
            lat = (1 - w) * lat_lo + w * lat_hi
            bw = (1 - w) * bw_lo + w * bw_hi
        return lat, min(bw, demand)

    def peak(self, read_fraction: float) -> float:
        return self.interpolate(read_fraction, float(self.demands[-1]) * 10)[1]


@dataclass(frozen=True)
class TierSpec:
    id: TierId
    capacity_pages: int
    perf: TierPerformanceModel
    read_energy: float  # nJ per 64B access
    write_energy: float

    def __post_init__(self):
        if self.capacity_pages <= 0:
            raise ConfigError(f"{self.id.name} capacity must be positive")


@dataclass
class ServiceResult:
    achieved_bw: float  # MB/s
    mean_latency: float  # ns
    energy: float  # nJ
    offered_bw: float = 0.0
    serviced_fraction: float = 1.0
    serviced_read_bytes: float = 0.0
    serviced_write_bytes: float = 0.0


class TierModel:
    """The two tiers of one simulated socket."""

    def __init__(self, specs: Dict[TierId, TierSpec]):
        if set(specs) != set(TIERS):
            raise ConfigError("Exactly two tiers (FAST and SLOW) are required")
        self.specs = dict(specs)

    def spec(self, tier) -> TierSpec:
        try:
            return self.specs[TierId.parse(tier)]
        except KeyError:
            raise UnknownTierError(f"Unknown tier: {tier!r}")

    def capacity(self, tier) -> int:
        return self.spec(tier).capacity_pages

    def service_epoch(self, tier, read_bytes: float, write_bytes: float, epoch_length: float) -> ServiceResult:
        """Serve one epoch of offered traffic; bytes above the achievable rate stay unserved."""
        spec = self.spec(tier)
        if read_bytes < 0 or write_bytes < 0:
            raise NegativeTrafficError(f"Negative byte count offered to {spec.id.name}")
        if epoch_length <= 0:
            raise ConfigError("epoch_length must be positive")

        total = read_bytes + write_bytes
        if total == 0:
            return ServiceResult(achieved_bw=0.0, mean_latency=spec.perf.base_latency, energy=0.0)

        read_fraction = read_bytes / total
        demand = total / epoch_length / MB
        latency, bandwidth = spec.perf.interpolate(read_fraction, demand)
        fraction = min(1.0, bandwidth / demand) if demand > 0 else 1.0
        served_r = read_bytes * fraction
        served_w = write_bytes * fraction
        energy = served_r / CACHELINE * spec.read_energy + served_w / CACHELINE * spec.write_energy
        return ServiceResult(
            achieved_bw=bandwidth,
            mean_latency=latency,
            energy=energy,
            offered_bw=demand,
            serviced_fraction=fraction,
            serviced_read_bytes=served_r,
            serviced_write_bytes=served_w,
        )


@dataclass
class CounterSnapshot:
    read_bw: Dict[TierId, float]
    write_bw: Dict[TierId, float]
    window_length: int
    short_window: bool = False

    def total_bw(self, tier: TierId) -> float:
        return self.read_bw[tier] + self.write_bw[tier]


class BandwidthCounters:
    """Per-tier read/write byte counters sampled over a sliding window of epochs."""

    def __init__(self, epoch_length: float, history: int = 4096):
        self.epoch_length = epoch_length
        self._history: Dict[TierId, Deque[Tuple[float, float]]] = {
            t: deque(maxlen=history) for t in TIERS
        }
        self._current = {t: [0.0, 0.0] for t in TIERS}
        self.elapsed = 0

    def record(self, tier: TierId, read_bytes: float, write_bytes: float) -> None:
        if read_bytes < 0 or write_bytes < 0:
            raise NegativeTrafficError("Counters only accept non-negative byte counts")
        cur = self._current[TierId.parse(tier)]
        cur[0] += read_bytes
        cur[1] += write_bytes

    def close_epoch(self) -> None:
        for t in TIERS:
            self._history[t].append(tuple(self._current[t]))
            self._current[t] = [0.0, 0.0]
        self.elapsed += 1

    def reset(self) -> None:
        for t in TIERS:
            self._history[t].clear()
            self._current[t] = [0.0, 0.0]
        self.elapsed = 0

    def window_bytes(self, tier: TierId, window: int) -> Tuple[float, float]:
        entries = list(self._history[tier])[-window:] if window > 0 else []
        return sum(e[0] for e in entries), sum(e[1] for e in entries)

    def sample(self, window: int) -> CounterSnapshot:
        """Average read/write MB/s per tier over the last ``window`` epochs."""
        if window <= 0:
            raise ConfigError(f"counter window must be positive, got {window}")
        if self.elapsed == 0:
            raise SimulationError("No epoch has elapsed; counters are empty")
        available = min(self.elapsed, len(self._history[TierId.FAST]))
        short = window > available
        if short:
            logger.debug("counter window %d clamped to %d epochs", window, available)
        window = min(window, available)
        seconds = window * self.epoch_length
        read_bw, write_bw = {}, {}
        for t in TIERS:
            r, w = self.window_bytes(t, window)
            read_bw[t] = r / seconds / MB
            write_bw[t] = w / seconds / MB
        return CounterSnapshot(read_bw, write_bw, window, short)


# Calibration files

@dataclass
class Calibration:
    models: Dict[TierId, TierPerformanceModel]
    capacity_bytes: Dict[TierId, int]
    read_energy: Dict[TierId, float]
    write_energy: Dict[TierId, float]
    max_offered_demand: float = 90000.0
    source: Optional[str] = None

    def tier_model(self, page_scale: int = 1, capacity_bytes: Optional[Dict[TierId, int]] = None) -> TierModel:
        """Instantiate both tiers; capacities are expressed in pages of 4 KiB x page_scale."""
        capacities = dict(self.capacity_bytes)
        if capacity_bytes:
            capacities.update(capacity_bytes)
        page_bytes = PAGE_SIZE * page_scale
        specs = {
            t: TierSpec(
                id=t,
                capacity_pages=int(capacities[t] // page_bytes),
                perf=self.models[t],
                read_energy=self.read_energy[t],
                write_energy=self.write_energy[t],
            )
            for t in TIERS
        }
        return TierModel(specs)


def _tier_to_dict(model: TierPerformanceModel, capacity: int, read_energy: float, write_energy: float) -> dict:
    return {
        "capacity_gib": round(capacity / GIB, 6),
        "read_energy_nj": read_energy,
        "write_energy_nj": write_energy,
        "divergence_knee_mbps": model.divergence_knee,
        "anchors": [
            [a.read_fraction, a.offered_demand, a.latency, a.achieved_bandwidth] for a in model.anchors
        ],
    }


def calibration_to_dict(cal: Calibration) -> dict:
    return {
        "schema_version": CALIBRATION_SCHEMA_VERSION,
        "max_offered_demand_mbps": cal.max_offered_demand,
        "tiers": {
            t.name: _tier_to_dict(cal.models[t], cal.capacity_bytes[t], cal.read_energy[t], cal.write_energy[t])
            for t in TIERS
        },
    }


def calibration_from_dict(data: dict, source: str = None) -> Calibration:
    if not isinstance(data, dict):
        raise ConfigError("Calibration must be a mapping")
    version = data.get("schema_version")
    if version != CALIBRATION_SCHEMA_VERSION:
        raise ConfigError(f"Unsupported calibration schema_version: {version!r}")
    tiers = data.get("tiers") or {}
    models, capacities, r_energy, w_energy = {}, {}, {}, {}
    problems = []
    for t in TIERS:
        raw = tiers.get(t.name)
        if raw is None:
            raise ConfigError(f"Calibration is missing tier {t.name}")
        try:
            anchors = [Anchor(*map(float, row)) for row in raw["anchors"]]
            model = TierPerformanceModel.from_anchors(anchors, float(raw["divergence_knee_mbps"]))
            capacities[t] = int(float(raw["capacity_gib"]) * GIB)
            r_energy[t] = float(raw["read_energy_nj"])
            w_energy[t] = float(raw["write_energy_nj"])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Malformed calibration for tier {t.name}: {e}")
        problems.extend(f"{t.name} {p}" for p in model.validate())
        models[t] = model
    if problems:
        raise CalibrationError("Calibration violates monotonicity", problems)
    return Calibration(
        models=models,
        capacity_bytes=capacities,
        read_energy=r_energy,
        write_energy=w_energy,
        max_offered_demand=float(data.get("max_offered_demand_mbps", 90000.0)),
        source=source,
    )


def load_calibration(path: str) -> Calibration:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"Cannot read calibration {path}: {e}")
    except yaml.YAMLError as e:
        raise ConfigError(f"Calibration {path} is not valid YAML: {e}")
    return calibration_from_dict(data, source=path)


def export_calibration(cal: Calibration, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(calibration_to_dict(cal), f, sort_keys=False)
