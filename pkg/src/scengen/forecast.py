"""Scenario forecasting by optimizing over the generator's latent space.

Stage one fits the generator output to a randomly drawn target inside a
slightly narrowed band around the point forecast (diversifying the
restarts); stage two maximizes critic realism under the full band,
folding the box constraint into the objective as two log barriers with
a decreasing barrier weight.  Every restart runs on its own child RNG
stream, so a scenario set is a pure function of (model, forecast,
alpha, N, seed).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Graph, NumericFaultError, backward_grad
from .models import ModelParams, bind_params, discriminator_forward, generator_forward

MANIFEST_NAME = "scenarios.json"


@dataclass
class PointForecast:
    values: np.ndarray           # [sites, horizon], per-unit
    site_ids: list[str]
    issue_time: str              # ISO timestamp of the first forecast step
    step_minutes: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"point forecast must be 2-d, got {self.values.shape}")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("point forecast entries must lie in [0, 1] per-unit")
        if len(self.site_ids) != self.values.shape[0]:
            raise ValueError("one site id per forecast row required")


@dataclass
class PredictionInterval:
    alpha: float
    lower: np.ndarray
    upper: np.ndarray
    eps_floor: float

    def __post_init__(self):
        if not (np.all(self.lower >= 0.0) and np.all(self.upper <= 1.0)
                and np.all(self.lower < self.upper)):
            raise ValueError("interval must satisfy 0 <= lower < upper <= 1 elementwise")

    def contains_strictly(self, x: np.ndarray) -> bool:
        return bool(np.all(x > self.lower) and np.all(x < self.upper))

    def width(self) -> np.ndarray:
        return self.upper - self.lower


def interval_bounds(forecast: PointForecast, alpha: float,
                    eps_floor: float = 0.02) -> PredictionInterval:
    """Multiplicative band [p/alpha, alpha*p] capped to [0, 1].

    Cells narrower than 2*eps_floor (a zero forecast collapses the raw
    band to a point, where a log barrier is undefined) are widened to
    exactly that width and shifted back inside the unit range.
    """
    if alpha <= 1.0:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    if not 0.0 < eps_floor < 0.5:
        raise ValueError(f"eps_floor must be in (0, 0.5), got {eps_floor}")
    p = forecast.values
    lower = np.clip(p / alpha, 0.0, 1.0)
    upper = np.clip(alpha * p, 0.0, 1.0)
    narrow = (upper - lower) < 2.0 * eps_floor
    center = 0.5 * (lower + upper)
    lo = center - eps_floor
    hi = center + eps_floor
    shift = np.maximum(0.0, -lo)
    lo += shift
    hi += shift
    shift = np.maximum(0.0, hi - 1.0)
    lo -= shift
    hi -= shift
    return PredictionInterval(alpha=alpha,
                              lower=np.where(narrow, lo, lower),
                              upper=np.where(narrow, hi, upper),
                              eps_floor=eps_floor)


def init_alpha(alpha: float) -> float:
    """Narrowing rule for the stage-one band: three quarters of the way out."""
    return 1.0 + 0.75 * (alpha - 1.0)


def sample_init_target(forecast: PointForecast, alpha: float,
                       rng: np.random.Generator, alpha_init: Optional[float] = None,
                       eps_floor: float = 0.02) -> np.ndarray:
    """Uniform draw from the narrowed band; one target per restart."""
    a_init = init_alpha(alpha) if alpha_init is None else alpha_init
    if not 1.0 < a_init < alpha:
        raise ValueError(f"alpha_init must be in (1, alpha), got {a_init}")
    band = interval_bounds(forecast, a_init, eps_floor)
    return band.lower + (band.upper - band.lower) * rng.random(band.lower.shape)


@dataclass(frozen=True)
class LatentOptConfig:
    init_steps: int = 60
    init_lr: float = 0.1
    hinge_weight: float = 10.0
    main_steps: int = 80                 # per barrier stage
    main_lr: float = 0.05
    barrier_schedule: tuple[float, ...] = (1e-1, 1e-2, 1e-3)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    z_radius: float = 3.0
    saturation_floor: float = 1e-12
    max_retries: int = 3
    interior_margin: float = 1e-9        # strictness slack for the barrier


@dataclass
class ScenarioRecord:
    restart_index: int
    z_star: np.ndarray
    critic_score: float
    feasible: bool
    iterations: int
    retries_used: int


@dataclass
class ScenarioSet:
    scenarios: np.ndarray                # [N, sites, horizon]
    records: list[ScenarioRecord]
    alpha: float
    seed: int
    interval: PredictionInterval
    shortfall: int = 0
    site_ids: list[str] = field(default_factory=list)

    def feasible_scenarios(self) -> np.ndarray:
        keep = [i for i, r in enumerate(self.records) if r.feasible]
        return self.scenarios[keep]

    def spread(self) -> float:
        """Mean per-cell standard deviation across scenarios."""
        return float(np.std(self.scenarios, axis=0).mean())


def _clip_latent(z: np.ndarray, radius: float) -> np.ndarray:
    return np.clip(z, -radius, radius)


def _gen_values(params: ModelParams, z: np.ndarray) -> np.ndarray:
    graph = Graph()
    handles = bind_params(graph, params, trainable=False, subset="g.")
    return generator_forward(graph, handles, params.config,
                             graph.constant(z[None, :])).values[0]


def _init_objective_value(params, z, target, interval, hinge_w) -> float:
    x = _gen_values(params, z)
    fit = float(np.sqrt(np.sum((x - target) ** 2)))
    lo = np.maximum(interval.lower - x, 0.0)
    hi = np.maximum(x - interval.upper, 0.0)
    return fit + hinge_w * float(np.sum(lo * lo + hi * hi))


def _init_gradient(params, z, target, interval, hinge_w) -> np.ndarray:
    graph = Graph()
    handles = bind_params(graph, params, trainable=False, subset="g.")
    zt = graph.input("z", z[None, :])
    x = generator_forward(graph, handles, params.config, zt)
    diff = x - graph.constant(target[None])
    fit = (diff * diff).sum() ** 0.5
    lo = (graph.constant(interval.lower[None]) - x).relu()
    hi = (x - graph.constant(interval.upper[None])).relu()
    obj = fit + hinge_w * ((lo * lo).sum() + (hi * hi).sum())
    grad = backward_grad(graph, obj).get(zt.node_id)
    return grad.values[0] if grad is not None else np.zeros_like(z)


def solve_init(params: ModelParams, target: np.ndarray, interval: PredictionInterval,
               cfg: LatentOptConfig, z0: np.ndarray,
               rng: Optional[np.random.Generator] = None):
    """Stage one: descend |G(z) - target| with a hinge keeping G(z) near the band.

    Gradient steps along the normalized direction with backtracking (the
    accepted objective is nonincreasing); the step length, not the raw
    gradient scale, controls movement, so a nearly-flat generator still
    gets traversed.  A fully saturated gradient falls back to a random
    latent perturbation.  Returns (z, diagnostics).
    """
    z = _clip_latent(np.array(z0, dtype=np.float64), cfg.z_radius)
    f_curr = _init_objective_value(params, z, target, interval, cfg.hinge_weight)
    initial = f_curr
    history = [f_curr]
    steps_used = 0
    step = cfg.init_lr
    for _ in range(cfg.init_steps):
        grad = _init_gradient(params, z, target, interval, cfg.hinge_weight)
        norm = float(np.linalg.norm(grad))
        if norm < cfg.saturation_floor:
            if rng is None:
                break
            z = _clip_latent(z + 0.1 * rng.standard_normal(z.shape), cfg.z_radius)
            f_curr = _init_objective_value(params, z, target, interval, cfg.hinge_weight)
            continue
        direction = grad / norm
        step = min(max(step * 2.0, cfg.init_lr * 1e-3), cfg.init_lr * 4.0)
        accepted = False
        for _ in range(25):
            cand = _clip_latent(z - step * direction, cfg.z_radius)
            f_cand = _init_objective_value(params, cand, target, interval,
                                           cfg.hinge_weight)
            if f_cand <= f_curr:
                z, f_curr, accepted = cand, f_cand, True
                break
            step *= 0.5
        steps_used += 1
        if not accepted:
            break
        history.append(f_curr)
    return z, {"initial_objective": initial, "final_objective": f_curr,
               "steps": steps_used, "history": history}


def _critic_score(params: ModelParams, x: np.ndarray) -> float:
    graph = Graph()
    handles = bind_params(graph, params, trainable=False, subset="d.")
    scores, _ = discriminator_forward(graph, handles, params.config,
                                      graph.constant(x[None]), mode="eval")
    return float(scores.values[0])


def _barrier_gradient(params, z, interval, gamma):
    """d/dz of -D(G(z)) - gamma * sum(log(G-L) + log(U-G)); z must be interior."""
    graph = Graph()
    g_handles = bind_params(graph, params, trainable=False, subset="g.")
    d_handles = bind_params(graph, params, trainable=False, subset="d.")
    zt = graph.input("z", z[None, :])
    x = generator_forward(graph, g_handles, params.config, zt)
    scores, _ = discriminator_forward(graph, d_handles, params.config, x, mode="eval")
    obj = -scores.sum()
    if gamma > 0:
        lower = graph.constant(interval.lower[None])
        upper = graph.constant(interval.upper[None])
        barrier = (x - lower).log().sum() + (upper - x).log().sum()
        obj = obj - gamma * barrier
    grad = backward_grad(graph, obj).get(zt.node_id)
    g = grad.values[0] if grad is not None else np.zeros_like(z)
    return g, float(scores.values[0])


def solve_main(params: ModelParams, z_init: np.ndarray, interval: PredictionInterval,
               cfg: LatentOptConfig, rng: Optional[np.random.Generator] = None):
    """Stage two: barrier-penalized realism maximization inside the band.

    Adam-style steps on z over a decreasing barrier schedule; any step
    whose generator output leaves the strict interior is pulled back by
    halving toward the previous iterate.  Returns the most realistic
    strictly interior iterate seen (z*, scenario, feasible, diagnostics).
    """
    z = _clip_latent(np.array(z_init, dtype=np.float64), cfg.z_radius)
    margin = cfg.interior_margin
    iterations = 0

    def interior(x):
        return bool(np.all(x > interval.lower + margin)
                    and np.all(x < interval.upper - margin))

    x = _gen_values(params, z)
    if not interior(x):
        # pre-phase: pure hinge descent pushes the iterate into the band
        z, _diag = _push_interior(params, z, interval, cfg, rng)
        x = _gen_values(params, z)
        if not interior(x):
            score = _critic_score(params, x)
            return z, x, False, {"reason": "no interior point found",
                                 "iterations": _diag["steps"], "critic_score": score}

    best_z, best_x = z.copy(), x.copy()
    best_score = _critic_score(params, x)
    for gamma in cfg.barrier_schedule:
        m = np.zeros_like(z)
        v = np.zeros_like(z)
        for t in range(1, cfg.main_steps + 1):
            grad, score = _barrier_gradient(params, z, interval, gamma)
            iterations += 1
            if score > best_score:
                best_score, best_z, best_x = score, z.copy(), _gen_values(params, z)
            if np.max(np.abs(grad)) < cfg.saturation_floor:
                if rng is None:
                    break
                cand = _clip_latent(z + 0.1 * rng.standard_normal(z.shape), cfg.z_radius)
                if interior(_gen_values(params, cand)):
                    z = cand
                continue
            m = cfg.adam_beta1 * m + (1 - cfg.adam_beta1) * grad
            v = cfg.adam_beta2 * v + (1 - cfg.adam_beta2) * grad * grad
            m_hat = m / (1 - cfg.adam_beta1 ** t)
            v_hat = v / (1 - cfg.adam_beta2 ** t)
            delta = cfg.main_lr * m_hat / (np.sqrt(v_hat) + 1e-8)
            scale = 1.0
            moved = False
            for _ in range(30):
                cand = _clip_latent(z - scale * delta, cfg.z_radius)
                if interior(_gen_values(params, cand)):
                    z = cand
                    moved = True
                    break
                scale *= 0.5
            if not moved:
                break
    x = _gen_values(params, z)
    final_score = _critic_score(params, x)
    if interior(x) and final_score > best_score:
        best_score, best_z, best_x = final_score, z, x
    feasible = interval.contains_strictly(best_x)
    return best_z, best_x, feasible, {"iterations": iterations,
                                      "critic_score": best_score}


def _push_interior(params, z, interval, cfg, rng):
    """Hinge-only descent used when the stage-one result starts outside."""
    z = z.copy()
    target = 0.5 * (interval.lower + interval.upper)
    steps = 0
    f_curr = _init_objective_value(params, z, target, interval, cfg.hinge_weight)
    step = cfg.init_lr
    for _ in range(cfg.init_steps):
        x = _gen_values(params, z)
        if np.all(x > interval.lower + cfg.interior_margin) and \
                np.all(x < interval.upper - cfg.interior_margin):
            break
        grad = _init_gradient(params, z, target, interval, cfg.hinge_weight)
        norm = float(np.linalg.norm(grad))
        if norm < cfg.saturation_floor:
            if rng is None:
                break
            z = _clip_latent(z + 0.1 * rng.standard_normal(z.shape), cfg.z_radius)
            continue
        direction = grad / norm
        step = min(max(step * 2.0, cfg.init_lr * 1e-3), cfg.init_lr * 4.0)
        for _ in range(25):
            cand = _clip_latent(z - step * direction, cfg.z_radius)
            f_cand = _init_objective_value(params, cand, target, interval,
                                           cfg.hinge_weight)
            if f_cand <= f_curr:
                z, f_curr = cand, f_cand
                break
            step *= 0.5
        steps += 1
    return z, {"steps": steps}


def forecast_scenarios(params: ModelParams, forecast: PointForecast, alpha: float,
                       n_scenarios: int, cfg: Optional[LatentOptConfig] = None,
                       seed: int = 0, eps_floor: float = 0.02,
                       progress=None) -> ScenarioSet:
    """N independent restarts through both stages; deterministic given seed.

    Restart i draws its own RNG child stream, so results are independent
    of how many other restarts run.  Infeasible restarts are retried with
    fresh draws up to cfg.max_retries and reported in the shortfall count
    if they never land strictly inside the band.
    """
    if n_scenarios < 1:
        raise ValueError("need at least one scenario")
    arch = params.config
    if forecast.values.shape != (arch.sites, arch.horizon):
        raise ValueError(
            f"forecast shape {forecast.values.shape} does not match the "
            f"model ({arch.sites}, {arch.horizon})")
    cfg = cfg or LatentOptConfig()
    interval = interval_bounds(forecast, alpha, eps_floor)
    streams = np.random.SeedSequence([seed, 0x5ce0]).spawn(n_scenarios)
    scenarios = np.zeros((n_scenarios,) + forecast.values.shape)
    records = []
    shortfall = 0
    for i in range(n_scenarios):
        rng = np.random.default_rng(streams[i])
        feasible = False
        attempt = 0
        z_star, best, score, iters = None, None, -np.inf, 0
        while attempt <= cfg.max_retries and not feasible:
            z0 = _clip_latent(rng.standard_normal(arch.latent_dim), cfg.z_radius)
            target = sample_init_target(forecast, alpha, rng, eps_floor=eps_floor)
            try:
                z1, _ = solve_init(params, target, interval, cfg, z0, rng)
                z2, x, feasible, diag = solve_main(params, z1, interval, cfg, rng)
            except NumericFaultError:
                if z_star is None:
                    z_star, best = z0, _gen_values(params, z0)
                    score = _critic_score(params, best)
                attempt += 1
                continue
            iters += diag["iterations"]
            if z_star is None or diag["critic_score"] > score or feasible:
                z_star, best, score = z2, x, diag["critic_score"]
            attempt += 1
        if not feasible:
            shortfall += 1
        scenarios[i] = best
        records.append(ScenarioRecord(restart_index=i, z_star=z_star,
                                      critic_score=score, feasible=feasible,
                                      iterations=iters, retries_used=attempt - 1))
        if progress is not None:
            progress(f"restart {i + 1}/{n_scenarios}  feasible={feasible}  "
                     f"score={score:.4f}")
    out = ScenarioSet(scenarios=scenarios, records=records, alpha=alpha, seed=seed,
                      interval=interval, shortfall=shortfall,
                      site_ids=list(forecast.site_ids))
    _audit_feasibility(out)
    return out


def _audit_feasibility(ss: ScenarioSet) -> None:
    for rec, scen in zip(ss.records, ss.scenarios):
        if rec.feasible and not ss.interval.contains_strictly(scen):
            raise AssertionError(
                f"restart {rec.restart_index} flagged feasible but violates the band")


# -- file formats --------------------------------------------------------


def write_point_forecast(forecast: PointForecast, path) -> None:
    """CSV with sites as rows; the header carries the step timestamps."""
    start = datetime.fromisoformat(forecast.issue_time)
    step = timedelta(minutes=forecast.step_minutes)
    header = ["site_id"] + [(start + j * step).isoformat()
                            for j in range(forecast.values.shape[1])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for sid, row in zip(forecast.site_ids, forecast.values):
            writer.writerow([sid] + [repr(float(v)) for v in row])


def read_point_forecast(path) -> PointForecast:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "site_id" or len(header) < 3:
            raise ValueError(f"{path}: expected header 'site_id,<ISO timestamps...>'")
        stamps = [datetime.fromisoformat(h) for h in header[1:]]
        deltas = {stamps[i + 1] - stamps[i] for i in range(len(stamps) - 1)}
        if len(deltas) != 1:
            raise ValueError(f"{path}: header timestamps must be uniformly spaced")
        step_minutes = int(deltas.pop().total_seconds() // 60)
        site_ids, rows = [], []
        for row in reader:
            site_ids.append(row[0])
            rows.append([float(v) for v in row[1:]])
    return PointForecast(values=np.array(rows), site_ids=site_ids,
                         issue_time=stamps[0].isoformat(), step_minutes=step_minutes)


def write_scenario_set(ss: ScenarioSet, out_dir, forecast: PointForecast) -> None:
    """One CSV per scenario plus a JSON manifest with provenance."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec, scen in zip(ss.records, ss.scenarios):
        fname = f"scenario_{rec.restart_index:03d}.csv"
        pf = PointForecast(values=scen, site_ids=ss.site_ids,
                           issue_time=forecast.issue_time,
                           step_minutes=forecast.step_minutes)
        write_point_forecast(pf, out_dir / fname)
        entries.append({
            "file": fname,
            "restart_index": rec.restart_index,
            "feasible": rec.feasible,
            "critic_score": rec.critic_score,
            "iterations": rec.iterations,
            "retries_used": rec.retries_used,
            "z_star": [float(v) for v in rec.z_star],
        })
    manifest = {
        "alpha": ss.alpha,
        "seed": ss.seed,
        "eps_floor": ss.interval.eps_floor,
        "requested": len(ss.records),
        "shortfall": ss.shortfall,
        "mean_interval_width": float(ss.interval.width().mean()),
        "site_ids": ss.site_ids,
        "issue_time": forecast.issue_time,
        "step_minutes": forecast.step_minutes,
        "scenarios": entries,
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, indent=2))


def read_scenario_set(in_dir):
    """Returns (scenarios [N, K, T], manifest dict)."""
    in_dir = Path(in_dir)
    manifest = json.loads((in_dir / MANIFEST_NAME).read_text())
    blocks = []
    for entry in manifest["scenarios"]:
        pf = read_point_forecast(in_dir / entry["file"])
        blocks.append(pf.values)
    return np.stack(blocks), manifest
