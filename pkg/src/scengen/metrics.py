"""Statistical validation of scenario sets against reference data.

Autocorrelation uses the full-series mean in both numerator and
denominator (the biased estimator, kept deliberately so R(0) is exactly
one); cross-site correlation pools every sample and timestep per site;
the CDF comparison is the two-sample Kolmogorov-Smirnov statistic, which
is rank-based and therefore invariant under monotone transforms.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


class ConstantSeriesError(ValueError):
    """Autocorrelation of a constant series is undefined (0/0)."""


def autocorrelation(series, max_lag: int) -> np.ndarray:
    """R(h) for h = 0..max_lag: sum_{i<=n-h}(S_i - mu)(S_{i+h} - mu) / sum(S_i - mu)^2."""
    s = np.asarray(series, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError(f"need a 1-d series, got shape {s.shape}")
    n = s.size
    if n < max_lag + 2:
        raise ValueError(f"series of length {n} too short for max_lag {max_lag}")
    mu = s.mean()
    centered = s - mu
    denom = float(np.sum(centered * centered))
    if denom == 0.0:
        raise ConstantSeriesError("autocorrelation undefined for a constant series")
    return np.array([float(np.sum(centered[:n - h] * centered[h:])) / denom
                     for h in range(max_lag + 1)])


@dataclass
class CorrelationResult:
    matrix: np.ndarray           # [K, K], NaN where undefined
    defined: np.ndarray          # [K, K] bool mask

    def max_abs_difference(self, reference: np.ndarray) -> float:
        ref = np.asarray(reference)
        return float(np.max(np.abs(self.matrix[self.defined] - ref[self.defined])))


def cross_site_correlation(samples) -> CorrelationResult:
    """Pearson correlation between sites, pooled over samples and time.

    samples is [n, K, T]; a constant site yields flagged-undefined entries
    rather than NaN surprises.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"need [n, sites, horizon] samples, got {x.shape}")
    pooled = x.transpose(1, 0, 2).reshape(x.shape[1], -1)     # [K, n*T]
    k = pooled.shape[0]
    std = pooled.std(axis=1)
    ok = std > 0.0
    centered = pooled - pooled.mean(axis=1, keepdims=True)
    cov = centered @ centered.T / pooled.shape[1]
    denom = np.outer(std, std)
    matrix = np.full((k, k), np.nan)
    defined = np.outer(ok, ok)
    matrix[defined] = (cov / np.where(denom == 0.0, 1.0, denom))[defined]
    matrix[np.diag_indices(k)] = np.where(ok, 1.0, np.nan)
    # clamp the rounding fringe so the matrix is exactly symmetric in [-1, 1]
    matrix = np.clip((matrix + matrix.T) / 2.0, -1.0, 1.0)
    return CorrelationResult(matrix=matrix, defined=defined)


def cdf_compare(real, generated, grid_points: int = 256):
    """Two-sample KS distance plus an evenly gridded CDF table for plotting.

    Returns (ks, table) where table rows are (value, cdf_real, cdf_generated).
    """
    a = np.sort(np.asarray(real, dtype=np.float64).ravel())
    b = np.sort(np.asarray(generated, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    pooled.sort()
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    ks = float(np.max(np.abs(cdf_a - cdf_b)))
    lo, hi = pooled[0], pooled[-1]
    grid = np.linspace(lo, hi, grid_points)
    table = np.column_stack([
        grid,
        np.searchsorted(a, grid, side="right") / a.size,
        np.searchsorted(b, grid, side="right") / b.size,
    ])
    return ks, table


def interval_coverage(scenarios, realization) -> float:
    """Fraction of cells where the realization sits inside the scenario envelope."""
    s = np.asarray(scenarios, dtype=np.float64)
    r = np.asarray(realization, dtype=np.float64)
    if s.ndim != r.ndim + 1 or s.shape[1:] != r.shape:
        raise ValueError(f"scenarios {s.shape} do not stack over realization {r.shape}")
    lo = s.min(axis=0)
    hi = s.max(axis=0)
    return float(np.mean((r >= lo) & (r <= hi)))


@dataclass
class MetricReport:
    autocorr_lags: int
    autocorr_realization: dict[str, list]        # site id -> R(h) values
    autocorr_scenarios: dict[str, list]          # site id -> [n_scen, lags+1]
    correlation_generated: list
    correlation_reference: Optional[list]
    correlation_frobenius: Optional[float]
    correlation_max_entry_diff: Optional[float]
    ks_per_site: dict[str, float]
    coverage: Optional[float]
    site_ids: list[str] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2)


def evaluate_scenarios(scenarios: np.ndarray, reference: np.ndarray,
                       site_ids: Optional[list[str]] = None, max_lag: int = 6,
                       realization: Optional[np.ndarray] = None,
                       reference_correlation: Optional[np.ndarray] = None) -> MetricReport:
    """Full report: temporal, spatial, and marginal statistics plus coverage.

    scenarios is [N, K, T]; reference is [n, K, T] real windows the model was
    trained against; realization (optional) is the actual [K, T] outcome.
    """
    n_scen, k, t = scenarios.shape
    ids = site_ids or [f"site{i:02d}" for i in range(k)]
    lag = min(max_lag, t - 2)

    ac_real, ac_scen = {}, {}
    if realization is not None:
        for i, sid in enumerate(ids):
            try:
                ac_real[sid] = autocorrelation(realization[i], lag).tolist()
            except ConstantSeriesError:
                ac_real[sid] = None
    for i, sid in enumerate(ids):
        rows = []
        for s in range(n_scen):
            try:
                rows.append(autocorrelation(scenarios[s, i], lag).tolist())
            except ConstantSeriesError:
                continue
        ac_scen[sid] = rows

    gen_corr = cross_site_correlation(scenarios)
    ref_corr = cross_site_correlation(reference)
    frob = None
    max_diff = None
    compare = np.asarray(reference_correlation) if reference_correlation is not None \
        else ref_corr.matrix
    if np.all(gen_corr.defined):
        diff = gen_corr.matrix - compare
        frob = float(np.sqrt(np.sum(diff * diff)))
        max_diff = float(np.max(np.abs(diff)))

    ks = {}
    for i, sid in enumerate(ids):
        stat, _ = cdf_compare(reference[:, i, :], scenarios[:, i, :])
        ks[sid] = stat

    coverage = interval_coverage(scenarios, realization) if realization is not None else None
    return MetricReport(
        autocorr_lags=lag,
        autocorr_realization=ac_real,
        autocorr_scenarios=ac_scen,
        correlation_generated=gen_corr.matrix.tolist(),
        correlation_reference=compare.tolist(),
        correlation_frobenius=frob,
        correlation_max_entry_diff=max_diff,
        ks_per_site=ks,
        coverage=coverage,
        site_ids=list(ids),
    )


def write_report(report: MetricReport, out_dir) -> None:
    """Serialize the report plus plot-ready CSVs (one per figure analog)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(report.to_json())

    with open(out_dir / "autocorrelation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", "kind", "scenario",
                         *[f"lag{h}" for h in range(report.autocorr_lags + 1)]])
        for sid, values in report.autocorr_realization.items():
            if values is not None:
                writer.writerow([sid, "realization", "", *[repr(v) for v in values]])
        for sid, rows in report.autocorr_scenarios.items():
            for idx, values in enumerate(rows):
                writer.writerow([sid, "scenario", idx, *[repr(v) for v in values]])

    with open(out_dir / "correlation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "site_id", *report.site_ids])
        for sid, row in zip(report.site_ids, report.correlation_generated):
            writer.writerow(["generated", sid, *[repr(v) for v in row]])
        if report.correlation_reference is not None:
            for sid, row in zip(report.site_ids, report.correlation_reference):
                writer.writerow(["reference", sid, *[repr(v) for v in row]])

    with open(out_dir / "ks.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", "ks_distance"])
        for sid, stat in report.ks_per_site.items():
            writer.writerow([sid, repr(stat)])
