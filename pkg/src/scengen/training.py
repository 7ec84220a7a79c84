"""Adversarial training with the improved critic objective.

The critic minimizes

    L_D = -E[D(x_real)] + E[D(G(z))] + lambda_gp * GP + lambda_ct * CT

where GP penalizes the critic's input-gradient norm deviating from one
on real/fake interpolates (built through a differentiable gradient node,
so the penalty itself trains the critic), and CT is a hinge on how far
apart two dropout-perturbed passes over the same real batch land.  The
generator minimizes -E[D(G(z))].  Updates alternate n_critic:1 under
Adam; every run is a pure function of (seed, config, data).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Graph, NumericFaultError, Tensor, backward_grad, input_grad_node
from .models import (ArchitectureConfig, ModelParams, bind_params,
                     discriminator_forward, generate, generator_forward,
                     init_params, load_params, save_params)


class TrainingAborted(RuntimeError):
    """Training hit a numeric fault; the last good checkpoint survives."""


@dataclass(frozen=True)
class TrainConfig:
    lambda_gp: float = 10.0
    lambda_ct: float = 2.0
    ct_margin: float = 0.0
    batch_size: int = 32
    n_critic: int = 5
    learning_rate: float = 1e-4
    critic_learning_rate: Optional[float] = None   # defaults to learning_rate
    beta1: float = 0.5
    beta2: float = 0.9
    adam_eps: float = 1e-8
    iterations: int = 2000
    log_every: int = 100
    seed: int = 0
    # wall_clock=False writes 0.0 in the seconds column so two same-seed
    # runs produce byte-identical logs; timings then go to stdout only.
    wall_clock: bool = True

    def __post_init__(self):
        if self.lambda_gp < 0 or self.lambda_ct < 0:
            raise ValueError("penalty weights must be nonnegative")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class LogRecord:
    iteration: int
    l_d_train: float
    l_d_holdout: float
    wass_est: float
    gp: float
    ct: float
    seconds: float


@dataclass
class TrainLog:
    records: list[LogRecord] = field(default_factory=list)

    HEADER = ("iter", "l_d_train", "l_d_holdout", "wass_est", "gp", "ct", "seconds")

    def append(self, rec: LogRecord):
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("log iterations must strictly increase")
        if not all(np.isfinite(v) for v in asdict(rec).values()):
            raise ValueError("log record contains non-finite values")
        self.records.append(rec)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.HEADER)
            for r in self.records:
                writer.writerow([r.iteration, repr(r.l_d_train), repr(r.l_d_holdout),
                                 repr(r.wass_est), repr(r.gp), repr(r.ct),
                                 repr(r.seconds)])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != cls.HEADER:
                raise ValueError(f"unexpected train log header {header}")
            for row in reader:
                log.append(LogRecord(int(row[0]), *(float(v) for v in row[1:])))
        return log


def _uname(graph: Graph, base: str) -> str:
    return f"{base}@{len(graph.nodes)}"


def gradient_penalty(graph: Graph, handles: dict[str, Tensor], cfg: ArchitectureConfig,
                     x_real: np.ndarray, x_fake: np.ndarray,
                     rng: np.random.Generator) -> Tensor:
    """Mean (|grad_x D(x_interp)| - 1)^2 over one-t-per-sample interpolates.

    Dropout stays off on this path; the returned scalar participates in
    further backward passes through the embedded gradient node.
    """
    if x_real.shape != x_fake.shape:
        raise ValueError(f"batch shapes differ: {x_real.shape} vs {x_fake.shape}")
    t = rng.random((x_real.shape[0],) + (1,) * (x_real.ndim - 1))
    interp = graph.input(_uname(graph, "x_interp"), t * x_real + (1.0 - t) * x_fake)
    scores, _ = discriminator_forward(graph, handles, cfg, interp, mode="eval")
    grad = input_grad_node(graph, scores.sum(), interp)
    sq = (grad * grad).sum(axes=tuple(range(1, x_real.ndim)))
    norm = sq ** 0.5
    dev = norm - 1.0
    return (dev * dev).mean()


def consistency_term(graph: Graph, handles: dict[str, Tensor], cfg: ArchitectureConfig,
                     x_real: np.ndarray, margin: float, rng: np.random.Generator,
                     masks: Optional[list] = None) -> Tensor:
    """Hinge on the spread between two dropout draws over the same batch.

    Per sample: max(0, |feat' - feat''| + 0.1 * |score' - score''| - margin),
    averaged; feat is the critic's penultimate activation.
    """
    x = graph.constant(x_real)
    s1, f1 = discriminator_forward(graph, handles, cfg, x, mode="train", rng=rng,
                                   masks=masks)
    s2, f2 = discriminator_forward(graph, handles, cfg, x, mode="train", rng=rng,
                                   masks=masks)
    df = f1 - f2
    feat_dist = (df * df).sum(axes=1) ** 0.5
    ds = s1 - s2
    score_dist = (ds * ds) ** 0.5
    return (feat_dist + 0.1 * score_dist - margin).relu().mean()


def critic_loss(graph: Graph, handles: dict[str, Tensor], params: ModelParams,
                cfg: TrainConfig, x_real: np.ndarray, z: np.ndarray,
                rng: np.random.Generator) -> Tensor:
    """Full critic objective on one batch; generator output is detached."""
    arch = params.config
    x_fake = generate(params, z)
    real = graph.constant(x_real)
    fake = graph.constant(x_fake)
    s_real, _ = discriminator_forward(graph, handles, arch, real, mode="train", rng=rng)
    s_fake, _ = discriminator_forward(graph, handles, arch, fake, mode="train", rng=rng)
    loss = s_fake.mean() - s_real.mean()
    if cfg.lambda_gp > 0:
        loss = loss + cfg.lambda_gp * gradient_penalty(graph, handles, arch,
                                                       x_real, x_fake, rng)
    if cfg.lambda_ct > 0:
        loss = loss + cfg.lambda_ct * consistency_term(graph, handles, arch,
                                                       x_real, cfg.ct_margin, rng)
    return loss


def generator_loss(graph: Graph, g_handles: dict[str, Tensor], params: ModelParams,
                   z: np.ndarray, rng: Optional[np.random.Generator] = None) -> Tensor:
    """-E[D(G(z))] with the critic frozen as constants."""
    arch = params.config
    d_handles = bind_params(graph, params, trainable=False, subset="d.")
    zc = graph.constant(z)
    x_fake = generator_forward(graph, g_handles, arch, zc)
    mode = "train" if rng is not None and arch.dropout_p > 0 else "eval"
    scores, _ = discriminator_forward(graph, d_handles, arch, x_fake, mode=mode, rng=rng)
    return -scores.mean()


# -- Adam ----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def like(cls, tensors: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(v) for k, v in tensors.items()},
                   v={k: np.zeros_like(v) for k, v in tensors.items()})


def adam_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float, beta2: float,
              eps: float) -> None:
    """One in-place Adam update with bias correction over a named slice."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        if g.shape != tensors[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        tensors[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _grads_for(graph: Graph, loss: Tensor, handles: dict[str, Tensor]) -> dict[str, np.ndarray]:
    gmap = backward_grad(graph, loss)
    out = {}
    for name, handle in handles.items():
        entry = gmap.get(handle.node_id)
        out[name] = entry.values if entry is not None else np.zeros(handle.shape)
    return out


# -- training loop -------------------------------------------------------


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state

def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def _stream(seed: int, tag: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag, *extra]))


def evaluate_critic_loss(params: ModelParams, cfg: TrainConfig, x_real: np.ndarray,
                         z: np.ndarray, rng: np.random.Generator):
    """Deterministic critic-loss snapshot for the train log.

    Returns (l_d, gp, ct) as floats, where l_d is the dual-gap loss
    -E[D(x_real)] + E[D(G(z))] under the eval-mode critic; the penalty
    terms are reported alongside, not folded in, mirroring how the
    combined objective is assembled from them.
    """
    arch = params.config
    graph = Graph()
    handles = bind_params(graph, params, trainable=False, subset="d.")
    x_fake = generate(params, z)
    s_real, _ = discriminator_forward(graph, handles, arch, graph.constant(x_real))
    s_fake, _ = discriminator_forward(graph, handles, arch, graph.constant(x_fake))
    main = float(s_fake.mean().values) - float(s_real.mean().values)
    gp = float(gradient_penalty(graph, handles, arch, x_real, x_fake, rng).values)
    ct = float(consistency_term(graph, handles, arch, x_real, cfg.ct_margin, rng).values)
    return main, gp, ct


def wasserstein_estimate(params: ModelParams, x_real: np.ndarray, z: np.ndarray) -> float:
    """E[D(x_real)] - E[D(G(z))] under the eval-mode critic."""
    from .models import criticize
    return float(np.mean(criticize(params, x_real)) -
                 np.mean(criticize(params, generate(params, z))))


def train(data, cfg: TrainConfig, arch: Optional[ArchitectureConfig] = None,
          out_dir=None, resume_from=None, progress=None):
    """Run the alternating scheme; returns (ModelParams, TrainLog).

    data must expose train_windows() / val_windows() as [n, K, T] arrays in
    [0, 1].  out_dir (optional) receives checkpoint.bin and trainlog.csv at
    every log stride.  resume_from continues bit-exactly from a checkpoint
    written by this function.  A numeric fault aborts with the last good
    checkpoint intact and a diagnostic record next to it.
    """
    train_w = data.train_windows()
    val_w = data.val_windows()
    if len(train_w) < 10 * cfg.batch_size:
        raise ValueError(
            f"need at least {10 * cfg.batch_size} training windows, have {len(train_w)}")
    if len(val_w) == 0:
        raise ValueError("need a held-out split")

    out_dir = Path(out_dir) if out_dir is not None else None
    log = TrainLog()
    if resume_from is not None:
        params = load_params(resume_from)
        if arch is not None and params.config != arch:
            raise ValueError("resume checkpoint architecture differs from requested")
        saved = params.extras["train_state"]
        data_rng = _restore_rng(saved["data_rng"])
        noise_rng = _restore_rng(saved["noise_rng"])
        drop_rng = _restore_rng(saved["drop_rng"])
        opt_d = AdamState(
            m={k[len("d_m/"):]: v for k, v in params.opt_tensors.items() if k.startswith("d_m/")},
            v={k[len("d_v/"):]: v for k, v in params.opt_tensors.items() if k.startswith("d_v/")},
            t=saved["opt_d_t"])
        opt_g = AdamState(
            m={k[len("g_m/"):]: v for k, v in params.opt_tensors.items() if k.startswith("g_m/")},
            v={k[len("g_v/"):]: v for k, v in params.opt_tensors.items() if k.startswith("g_v/")},
            t=saved["opt_g_t"])
        start = params.iteration
        if out_dir is not None and (out_dir / "trainlog.csv").exists():
            prior = TrainLog.read_csv(out_dir / "trainlog.csv")
            log.records = [r for r in prior.records if r.iteration <= start]
    else:
        if arch is None:
            arch = ArchitectureConfig(sites=train_w.shape[1], horizon=train_w.shape[2])
        params = init_params(arch, seed=cfg.seed)
        data_rng = _stream(cfg.seed, 1)
        noise_rng = _stream(cfg.seed, 2)
        drop_rng = _stream(cfg.seed, 4)
        opt_d = AdamState.like({k: v for k, v in params.tensors.items() if k.startswith("d.")})
        opt_g = AdamState.like({k: v for k, v in params.tensors.items() if k.startswith("g.")})
        start = 0

    arch = params.config
    if train_w.shape[1:] != (arch.sites, arch.horizon):
        raise ValueError(
            f"data windows {train_w.shape[1:]} do not match model ({arch.sites}, {arch.horizon})")

    # fixed, never-resampled evaluation material; the estimate batches are
    # larger than a train batch to keep the logged curves low-variance
    eval_n = min(max(cfg.batch_size, 128), len(val_w), len(train_w))
    holdout_batch = val_w[:eval_n]
    train_log_batch = train_w[:eval_n]
    z_log = _stream(cfg.seed, 6).normal(size=(eval_n, arch.latent_dim))

    last_checkpoint_iter = start

    def flush(checkpoint=True):
        nonlocal last_checkpoint_iter
        if out_dir is None:
            return
        out_dir.mkdir(parents=True, exist_ok=True)
        if checkpoint:
            params.opt_tensors = {}
            for prefix, state in (("d", opt_d), ("g", opt_g)):
                for k, v in state.m.items():
                    params.opt_tensors[f"{prefix}_m/{k}"] = v
                for k, v in state.v.items():
                    params.opt_tensors[f"{prefix}_v/{k}"] = v
            params.extras["train_state"] = {
                "data_rng": _rng_state(data_rng), "noise_rng": _rng_state(noise_rng),
                "drop_rng": _rng_state(drop_rng),
                "opt_d_t": opt_d.t, "opt_g_t": opt_g.t,
            }
            tmp = out_dir / "checkpoint.bin.tmp"
            save_params(params, tmp)
            tmp.replace(out_dir / "checkpoint.bin")
            last_checkpoint_iter = params.iteration
        log.write_csv(out_dir / "trainlog.csv")

    d_names = [k for k in params.tensors if k.startswith("d.")]
    g_names = [k for k in params.tensors if k.startswith("g.")]
    started = time.monotonic()

    iteration = start
    try:
        for iteration in range(start + 1, cfg.iterations + 1):
            for _ in range(cfg.n_critic):
                idx = data_rng.integers(0, len(train_w), size=cfg.batch_size)
                x_real = train_w[idx]
                z = noise_rng.normal(size=(cfg.batch_size, arch.latent_dim))
                graph = Graph()
                handles = bind_params(graph, params, trainable=True, subset="d.")
                # one rng drives interpolation draws and dropout; order is fixed
                loss = critic_loss(graph, handles, params, cfg, x_real, z, drop_rng)
                grads = _grads_for(graph, loss, handles)
                adam_step({k: params.tensors[k] for k in d_names}, grads, opt_d,
                          cfg.critic_learning_rate or cfg.learning_rate,
                          cfg.beta1, cfg.beta2, cfg.adam_eps)
            z = noise_rng.normal(size=(cfg.batch_size, arch.latent_dim))
            graph = Graph()
            g_handles = bind_params(graph, params, trainable=True, subset="g.")
            loss = generator_loss(graph, g_handles, params, z, drop_rng)
            grads = _grads_for(graph, loss, g_handles)
            adam_step({k: params.tensors[k] for k in g_names}, grads, opt_g,
                      cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
            params.iteration = iteration

            if iteration % cfg.log_every == 0 or iteration == cfg.iterations:
                # fixed draws per curve: checkpoints then differ only through
                # the parameters, keeping the two-curve comparison noise-free
                l_d_train, gp_val, ct_val = evaluate_critic_loss(
                    params, cfg, train_log_batch, z_log[:len(train_log_batch)],
                    _stream(cfg.seed, 5))
                l_d_hold, _, _ = evaluate_critic_loss(
                    params, cfg, holdout_batch, z_log[:len(holdout_batch)],
                    _stream(cfg.seed, 5, 1))
                wass = wasserstein_estimate(params, holdout_batch,
                                            z_log[:len(holdout_batch)])
                elapsed = time.monotonic() - started
                rec = LogRecord(iteration, l_d_train, l_d_hold, wass, gp_val, ct_val,
                                elapsed if cfg.wall_clock else 0.0)
                log.append(rec)
                flush()
                if progress is not None:
                    progress(f"iter {iteration}/{cfg.iterations}  "
                             f"L_D(train)={l_d_train:.4f}  L_D(holdout)={l_d_hold:.4f}  "
                             f"W={wass:.4f}  gp={gp_val:.4f}  ct={ct_val:.4f}  "
                             f"[{elapsed:.1f}s]")
    except NumericFaultError as fault:
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            with open(out_dir / "diagnostic.json", "w") as fh:
                json.dump({"aborted_at_iteration": iteration, "error": str(fault),
                           "last_checkpoint_iteration": last_checkpoint_iter,
                           }, fh, sort_keys=True, indent=2)
        raise TrainingAborted(
            f"numeric fault at iteration {iteration}: {fault}") from fault

    flush()
    return params, log
