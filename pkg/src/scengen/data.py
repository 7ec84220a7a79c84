"""Ingestion, windowing, and synthetic fixtures for multi-site series.

One CSV per site (header ``timestamp,power_mw``) plus a fleet sidecar
listing site ids, capacities, and the step length.  Values are held in
megawatts and converted to per-unit [0, 1] capacity when windowed into
[num_windows, sites, horizon] training tensors.

The synthetic fleets are built from generators with known structure —
spatially correlated AR(2) for wind, a clear-sky envelope times a cloud
process for solar — and emit their ground truth (correlation matrix,
envelope) alongside, so statistical oracles have a reference.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional

import numpy as np

FLEET_SIDECAR = "fleet.json"
TRUTH_SIDECAR = "truth.json"


class DataError(Exception):
    """Malformed input data; message carries per-file, per-line detail."""


@dataclass
class CsvSchema:
    timestamp_col: str = "timestamp"
    value_col: str = "power_mw"
    capacities: dict[str, float] = field(default_factory=dict)
    step_minutes: int = 60


@dataclass
class SiteSeries:
    site_id: str
    capacity_mw: float
    step_minutes: int
    start: datetime
    values_mw: np.ndarray

    def __post_init__(self):
        self.values_mw = np.asarray(self.values_mw, dtype=np.float64)
        if self.capacity_mw <= 0:
            raise DataError(f"site {self.site_id}: capacity must be positive")
        bad = np.flatnonzero((self.values_mw < 0) | (self.values_mw > self.capacity_mw))
        if bad.size:
            raise DataError(
                f"site {self.site_id}: value {self.values_mw[bad[0]]} outside "
                f"[0, {self.capacity_mw}] at index {bad[0]}")

    def __len__(self):
        return len(self.values_mw)

    def timestamps(self):
        step = timedelta(minutes=self.step_minutes)
        return [self.start + i * step for i in range(len(self.values_mw))]

    def per_unit(self) -> np.ndarray:
        return self.values_mw / self.capacity_mw


@dataclass
class Dataset:
    site_ids: list[str]
    capacities: np.ndarray
    step_minutes: int
    windows: np.ndarray          # [num_windows, sites, horizon], per-unit
    window_starts: np.ndarray    # row index of each window in the source grid
    train_idx: np.ndarray
    val_idx: np.ndarray

    def train_windows(self) -> np.ndarray:
        return self.windows[self.train_idx]

    def val_windows(self) -> np.ndarray:
        return self.windows[self.val_idx]


def _parse_timestamp(raw: str, where: str):
    try:
        return datetime.fromisoformat(raw)
    except ValueError:
        raise DataError(f"{where}: bad timestamp {raw!r}") from None


def load_csv(paths, schema: CsvSchema) -> list[SiteSeries]:
    """Parse one CSV per site; every defect is reported with its line number."""
    out = []
    for path in paths:
        path = Path(path)
        if not path.exists():
            raise DataError(f"{path}: no such file")
        site_id = path.stem
        if site_id not in schema.capacities:
            raise DataError(f"{path}: no capacity declared for site {site_id!r}")
        capacity = schema.capacities[site_id]
        problems = []
        stamps, values = [], []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or schema.timestamp_col not in reader.fieldnames \
                    or schema.value_col not in reader.fieldnames:
                raise DataError(
                    f"{path}: header must contain {schema.timestamp_col!r} and "
                    f"{schema.value_col!r}, got {reader.fieldnames}")
            for lineno, row in enumerate(reader, start=2):
                raw_v = (row.get(schema.value_col) or "").strip()
                if not raw_v:
                    problems.append(f"line {lineno}: missing value")
                    continue
                try:
                    v = float(raw_v)
                except ValueError:
                    problems.append(f"line {lineno}: unparseable value {raw_v!r}")
                    continue
                if math.isnan(v):
                    problems.append(f"line {lineno}: missing value (NaN)")
                    continue
                if v < 0:
                    problems.append(f"line {lineno}: negative power {v}")
                    continue
                if v > capacity:
                    problems.append(f"line {lineno}: value {v} exceeds capacity {capacity}")
                    continue
                stamps.append(_parse_timestamp(row[schema.timestamp_col], f"{path} line {lineno}"))
                values.append(v)
        if problems:
            raise DataError(f"{path}: " + "; ".join(problems))
        if len(stamps) < 2:
            raise DataError(f"{path}: need at least 2 rows, got {len(stamps)}")
        step = timedelta(minutes=schema.step_minutes)
        for i in range(1, len(stamps)):
            if stamps[i] == stamps[i - 1]:
                raise DataError(f"{path}: duplicate timestamp {stamps[i].isoformat()} "
                                f"at line {i + 2}")
            if stamps[i] < stamps[i - 1]:
                raise DataError(f"{path}: non-monotone timestamp at line {i + 2}")
            if stamps[i] - stamps[i - 1] != step:
                raise DataError(
                    f"{path}: gap or mixed step length at line {i + 2} "
                    f"({stamps[i] - stamps[i - 1]} != {step})")
        out.append(SiteSeries(site_id, capacity, schema.step_minutes, stamps[0],
                              np.array(values)))
    return out


def load_fleet(data_dir) -> list[SiteSeries]:
    """Load a directory written by write_fleet / the synth command."""
    data_dir = Path(data_dir)
    sidecar = data_dir / FLEET_SIDECAR
    if not sidecar.exists():
        raise DataError(f"{sidecar}: missing fleet sidecar")
    meta = json.loads(sidecar.read_text())
    schema = CsvSchema(capacities={s["id"]: s["capacity_mw"] for s in meta["sites"]},
                       step_minutes=meta["step_minutes"])
    paths = [data_dir / f"{s['id']}.csv" for s in meta["sites"]]
    return load_csv(paths, schema)


def write_fleet(series: list[SiteSeries], data_dir, truth: Optional[dict] = None) -> None:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "sites": [{"id": s.site_id, "capacity_mw": s.capacity_mw} for s in series],
        "step_minutes": series[0].step_minutes,
    }
    (data_dir / FLEET_SIDECAR).write_text(json.dumps(meta, sort_keys=True, indent=2))
    for s in series:
        with open(data_dir / f"{s.site_id}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestamp", "power_mw"])
            for ts, v in zip(s.timestamps(), s.values_mw):
                writer.writerow([ts.isoformat(), repr(float(v))])
    if truth is not None:
        (data_dir / TRUTH_SIDECAR).write_text(json.dumps(truth, sort_keys=True, indent=2))


def window_dataset(series: list[SiteSeries], horizon: int, stride: Optional[int] = None,
                   train_fraction: float = 0.8, seed: int = 0) -> Dataset:
    """Cut aligned series into [n, K, horizon] windows and split by seed.

    Non-overlapping windows (stride = horizon) are the default so near
    duplicates cannot leak across the train/validation split.
    """
    if not series:
        raise DataError("no series given")
    stride = horizon if stride is None else stride
    first = series[0]
    for s in series[1:]:
        if (s.start, s.step_minutes, len(s)) != (first.start, first.step_minutes, len(first)):
            raise DataError(
                f"site {s.site_id} timestamp grid differs from {first.site_id}")
    per_unit = np.stack([s.per_unit() for s in series])     # [K, n]
    n = per_unit.shape[1]
    starts = np.arange(0, n - horizon + 1, stride)
    if len(starts) < 2:
        raise DataError(
            f"insufficient data: {n} steps yield {len(starts)} windows of length {horizon}")
    windows = np.stack([per_unit[:, s0:s0 + horizon] for s0 in starts])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xda7a]))
    order = rng.permutation(len(starts))
    n_train = int(len(starts) * train_fraction)
    return Dataset(
        site_ids=[s.site_id for s in series],
        capacities=np.array([s.capacity_mw for s in series]),
        step_minutes=first.step_minutes,
        windows=windows,
        window_starts=starts,
        train_idx=np.sort(order[:n_train]),
        val_idx=np.sort(order[n_train:]),
    )


# -- synthetic fleets ----------------------------------------------------


@dataclass(frozen=True)
class SynthParams:
    rho: float = 0.9              # common cross-site innovation correlation
    ar1: float = 1.2
    ar2: float = -0.3
    mean_level: float = 0.5
    std_level: float = 0.18
    sunrise_hour: int = 6
    sunset_hour: int = 18
    cloud_persistence: float = 0.85
    capacity_base_mw: float = 100.0
    start_iso: str = "2024-01-01T00:00:00"


@dataclass
class SynthFleet:
    series: list[SiteSeries]
    truth: dict


def _correlated_innovations(rng, K, steps, rho):
    # equicorrelated Gaussian draws via a shared factor
    if not -1.0 / max(K - 1, 1) < rho < 1.0:
        raise ValueError(f"rho {rho} not a valid equicorrelation for K={K}")
    shared = rng.standard_normal(steps)
    own = rng.standard_normal((K, steps))
    if rho >= 0:
        return math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * own
    raise ValueError("negative rho not supported")


def synth_fleet(kind: str, sites: int, steps: int, seed: int = 0,
                params: Optional[SynthParams] = None) -> SynthFleet:
    """Desk-scale wind or solar fleet with known spatio-temporal structure."""
    if sites < 1:
        raise ValueError("need at least one site")
    p = params or SynthParams()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5f1e]))
    start = datetime.fromisoformat(p.start_iso)
    corr = np.full((sites, sites), p.rho) + (1.0 - p.rho) * np.eye(sites)
    capacities = p.capacity_base_mw + 5.0 * np.arange(sites)

    if kind == "wind":
        # stationary AR(2) scaled so clipping to [0, 1] is a rare event
        gamma0 = (1.0 - p.ar2) / ((1.0 + p.ar2) * ((1.0 - p.ar2) ** 2 - p.ar1 ** 2))
        innov_std = p.std_level / math.sqrt(gamma0)
        burn = 200
        e = innov_std * _correlated_innovations(rng, sites, steps + burn, p.rho)
        x = np.zeros((sites, steps + burn))
        for t in range(2, steps + burn):
            x[:, t] = p.ar1 * x[:, t - 1] + p.ar2 * x[:, t - 2] + e[:, t]
        per_unit = np.clip(p.mean_level + x[:, burn:], 0.0, 1.0)
        truth = {
            "kind": "wind", "rho": p.rho, "correlation": corr.tolist(),
            "ar_coefficients": [p.ar1, p.ar2],
            "mean_level": p.mean_level, "std_level": p.std_level,
        }
    elif kind == "solar":
        hours = np.arange(steps) % 24
        day_len = p.sunset_hour - p.sunrise_hour
        daylight = (hours >= p.sunrise_hour) & (hours < p.sunset_hour)
        lobe = np.maximum(np.sin(np.pi * (hours - p.sunrise_hour) / day_len), 0.0)
        envelope = np.where(daylight, lobe ** 1.2, 0.0)
        c = _correlated_innovations(rng, sites, steps, p.rho)
        cloud = np.empty_like(c)
        cloud[:, 0] = c[:, 0]
        for t in range(1, steps):
            cloud[:, t] = p.cloud_persistence * cloud[:, t - 1] + \
                math.sqrt(1 - p.cloud_persistence ** 2) * c[:, t]
        # map the Gaussian cloud state to an attenuation in [0.25, 1]
        atten = 0.25 + 0.75 / (1.0 + np.exp(-1.5 * cloud))
        per_unit = envelope[None, :] * atten
        truth = {
            "kind": "solar", "rho": p.rho, "correlation": corr.tolist(),
            "envelope": envelope[:24].tolist(),
            "night_hours": [int(h) for h in range(24)
                            if not p.sunrise_hour <= h < p.sunset_hour],
        }
    else:
        raise ValueError(f"unknown fleet kind {kind!r}")

    series = [SiteSeries(f"{kind}{i:02d}", float(capacities[i]), 60, start,
                         per_unit[i] * capacities[i])
              for i in range(sites)]
    return SynthFleet(series=series, truth=truth)


def persistence_forecast(series: list[SiteSeries], horizon: int, method: str = "last"):
    """Trivial point-forecast baseline over the next `horizon` steps.

    method "last" repeats each site's most recent value; "diurnal" replays
    the most recent full day, which is the sane default for solar.
    """
    from .forecast import PointForecast

    if not series:
        raise DataError("no series given")
    K = len(series)
    values = np.zeros((K, horizon))
    steps_per_day = int(24 * 60 / series[0].step_minutes)
    for i, s in enumerate(series):
        n = len(s)
        if method == "last":
            if n < 1:
                raise DataError(f"site {s.site_id}: empty history")
            values[i, :] = s.per_unit()[-1]
        elif method == "diurnal":
            if n < steps_per_day:
                raise DataError(
                    f"site {s.site_id}: need {steps_per_day} steps for a diurnal "
                    f"forecast, have {n}")
            # cycle[j] sits exactly one day before forecast step j
            cycle = s.per_unit()[n - steps_per_day:]
            values[i, :] = [cycle[j % steps_per_day] for j in range(horizon)]
        else:
            raise ValueError(f"unknown persistence method {method!r}")
    issue = series[0].timestamps()[-1] + timedelta(minutes=series[0].step_minutes)
    return PointForecast(values=values,
                         site_ids=[s.site_id for s in series],
                         issue_time=issue.isoformat(),
                         step_minutes=series[0].step_minutes)
