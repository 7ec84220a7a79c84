"""Generator and critic assembly, parameter init, and checkpoint I/O.

The generator maps latent noise through an MLP and a stack of 1-D
transposed convolutions to a [batch, sites, horizon] block in [0, 1].
The critic is an MLP over the flattened block; its penultimate
activation is exposed because the consistency term compares it between
two dropout draws.  The critic output is linear by default — an
unconstrained score is what the expectation-gap distance estimate
needs — with a sigmoid squash available behind config.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .autodiff import Graph, ShapeError, Tensor, UsageError
from .layers import conv_transpose_1d_forward, dense_forward, dropout_apply, layer_norm_forward

CHECKPOINT_MAGIC = b"SCGN"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Corrupt, truncated, or incompatible checkpoint file."""


class ConfigMismatchError(CheckpointError):
    """Checkpoint was written under a different architecture."""


@dataclass(frozen=True)
class ArchitectureConfig:
    sites: int = 4
    horizon: int = 24
    latent_dim: int = 32
    gen_dense_widths: tuple[int, ...] = (128,)
    gen_base_channels: int = 32
    gen_base_len: int = 3
    # (out_channels, kernel_len, stride) per transposed-conv layer;
    # strides must multiply base_len up to the horizon and the last layer
    # must emit one channel per site.
    gen_deconv: tuple[tuple[int, int, int], ...] = ((16, 5, 2), (8, 5, 2), (4, 5, 2))
    disc_widths: tuple[int, ...] = (256, 128, 64)
    leak_slope: float = 0.2
    dropout_p: float = 0.25
    output_nonlinearity: str = "sigmoid"     # or "clamp"
    critic_output: str = "linear"            # or "sigmoid"
    gen_layer_norm: bool = True
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.latent_dim < 1 or self.sites < 1 or self.horizon < 2:
            raise ValueError("need latent_dim >= 1, sites >= 1, horizon >= 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not 0.0 < self.leak_slope < 1.0:
            raise ValueError(f"leak_slope must be in (0, 1), got {self.leak_slope}")
        if self.output_nonlinearity not in ("sigmoid", "clamp"):
            raise ValueError(f"unknown output_nonlinearity {self.output_nonlinearity!r}")
        if self.critic_output not in ("linear", "sigmoid"):
            raise ValueError(f"unknown critic_output {self.critic_output!r}")
        length = self.gen_base_len
        for _, _, stride in self.gen_deconv:
            length *= stride
        if length != self.horizon:
            raise ValueError(
                f"deconv strides take base length {self.gen_base_len} to {length}, "
                f"but horizon is {self.horizon}")
        if self.gen_deconv[-1][0] != self.sites:
            raise ValueError(
                f"last deconv emits {self.gen_deconv[-1][0]} channels, "
                f"need one per site ({self.sites})")

    @property
    def feature_dim(self) -> int:
        return self.disc_widths[-1]

    def to_canonical_json(self) -> str:
        d = asdict(self)
        d["gen_dense_widths"] = list(self.gen_dense_widths)
        d["gen_deconv"] = [list(t) for t in self.gen_deconv]
        d["disc_widths"] = list(self.disc_widths)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        d = dict(d)
        d["gen_dense_widths"] = tuple(d["gen_dense_widths"])
        d["gen_deconv"] = tuple(tuple(t) for t in d["gen_deconv"])
        d["disc_widths"] = tuple(d["disc_widths"])
        return cls(**d)


@dataclass
class ModelParams:
    config: ArchitectureConfig
    tensors: dict[str, np.ndarray]
    iteration: int = 0
    seed: int = 0
    opt_tensors: dict[str, np.ndarray] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def equal(self, other: "ModelParams") -> bool:
        if self.config != other.config or self.iteration != other.iteration \
                or self.seed != other.seed or self.extras != other.extras:
            return False
        for mine, theirs in ((self.tensors, other.tensors),
                             (self.opt_tensors, other.opt_tensors)):
            if set(mine) != set(theirs):
                return False
            if any(not np.array_equal(mine[k], theirs[k]) for k in mine):
                return False
        return True


def _gen_layer_sizes(cfg: ArchitectureConfig):
    """(name, shape) pairs for every generator tensor, in forward order."""
    sizes = []
    width = cfg.latent_dim
    dense_widths = list(cfg.gen_dense_widths) + [cfg.gen_base_channels * cfg.gen_base_len]
    for i, out in enumerate(dense_widths):
        sizes.append((f"g.dense{i}.w", (width, out)))
        sizes.append((f"g.dense{i}.b", (out,)))
        if cfg.gen_layer_norm:
            sizes.append((f"g.ln{i}.gain", (out,)))
            sizes.append((f"g.ln{i}.bias", (out,)))
        width = out
    ch = cfg.gen_base_channels
    for i, (out_ch, klen, _) in enumerate(cfg.gen_deconv):
        sizes.append((f"g.deconv{i}.k", (ch, out_ch, klen)))
        sizes.append((f"g.deconv{i}.b", (out_ch,)))
        ch = out_ch
    return sizes


def _disc_layer_sizes(cfg: ArchitectureConfig):
    sizes = []
    width = cfg.sites * cfg.horizon
    n_hidden = len(cfg.disc_widths)
    for i, out in enumerate(cfg.disc_widths):
        sizes.append((f"d.dense{i}.w", (width, out)))
        sizes.append((f"d.dense{i}.b", (out,)))
        # the last hidden layer and the output stay normalization-free
        if i < n_hidden - 1:
            sizes.append((f"d.ln{i}.gain", (out,)))
            sizes.append((f"d.ln{i}.bias", (out,)))
        width = out
    sizes.append(("d.out.w", (width, 1)))
    sizes.append(("d.out.b", (1,)))
    return sizes


def parameter_count(cfg: ArchitectureConfig) -> int:
    """Analytic total parameter count; guards against dropped layers."""
    return sum(int(np.prod(shape))
               for _, shape in _gen_layer_sizes(cfg) + _disc_layer_sizes(cfg))


def _deconv_plan(horizon: int) -> tuple[int, tuple[int, int, int]]:
    """Pick (base_len, strides) so three deconv layers reach the horizon."""
    best = None
    for s1 in (4, 3, 2, 1):
        for s2 in (4, 3, 2, 1):
            for s3 in (4, 3, 2, 1):
                prod = s1 * s2 * s3
                if horizon % prod == 0:
                    base = horizon // prod
                    # favor the strongest upsampling with a small base
                    key = (prod, -base)
                    if best is None or key > best[0]:
                        best = (key, base, (s1, s2, s3))
    _, base, strides = best
    return base, strides


def default_architecture(sites: int, horizon: int, latent_dim: int = 32,
                         **overrides) -> ArchitectureConfig:
    """Standard model sized for a (sites, horizon) fleet."""
    base_len, strides = _deconv_plan(horizon)
    deconv = ((16, 5, strides[0]), (8, 5, strides[1]), (sites, 5, strides[2]))
    return ArchitectureConfig(sites=sites, horizon=horizon, latent_dim=latent_dim,
                              gen_base_len=base_len, gen_deconv=deconv, **overrides)


def init_params(cfg: ArchitectureConfig, seed: int = 0) -> ModelParams:
    """Scaled-uniform fan-in init for weights, zeros for biases, unit gains."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5ce9]))
    tensors = {}
    for name, shape in _gen_layer_sizes(cfg) + _disc_layer_sizes(cfg):
        leaf = name.rsplit(".", 1)[1]
        if leaf == "w":
            bound = 1.0 / np.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif leaf == "k":
            fan_in = shape[0] * shape[2]
            bound = 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif leaf == "gain":
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(config=cfg, tensors=tensors, seed=seed)


def bind_params(graph: Graph, params: ModelParams, trainable=True,
                subset: Optional[str] = None) -> dict[str, Tensor]:
    """Expose parameter tensors inside a graph.

    trainable=True binds them as named inputs (so backward reaches them);
    otherwise as constants.  subset "g." or "d." restricts to one network.
    """
    handles = {}
    for name, values in params.tensors.items():
        if subset is not None and not name.startswith(subset):
            continue
        handles[name] = graph.input(name, values) if trainable else graph.constant(values)
    return handles


def generator_forward(graph: Graph, handles: dict[str, Tensor],
                      cfg: ArchitectureConfig, z: Tensor) -> Tensor:
    """Map z [batch, latent_dim] to generation blocks [batch, sites, horizon]."""
    if len(z.shape) != 2 or z.shape[1] != cfg.latent_dim:
        raise ShapeError(f"generator: z must be [batch, {cfg.latent_dim}], got {z.shape}")
    batch = z.shape[0]
    h = z
    n_dense = len(cfg.gen_dense_widths) + 1
    for i in range(n_dense):
        h = dense_forward(h, handles[f"g.dense{i}.w"], handles[f"g.dense{i}.b"])
        if cfg.gen_layer_norm:
            h = layer_norm_forward(h, handles[f"g.ln{i}.gain"], handles[f"g.ln{i}.bias"],
                                   cfg.layer_norm_eps)
        h = h.relu()
    h = h.reshape((batch, cfg.gen_base_channels, cfg.gen_base_len))
    last = len(cfg.gen_deconv) - 1
    for i, (out_ch, _, stride) in enumerate(cfg.gen_deconv):
        h = conv_transpose_1d_forward(h, handles[f"g.deconv{i}.k"], stride)
        h = h + handles[f"g.deconv{i}.b"].reshape((1, out_ch, 1))
        if i < last:
            h = h.relu()
    if cfg.output_nonlinearity == "sigmoid":
        return h.sigmoid()
    return h.clip(0.0, 1.0)


def discriminator_forward(graph: Graph, handles: dict[str, Tensor],
                          cfg: ArchitectureConfig, x: Tensor, mode: str = "eval",
                          rng: Optional[np.random.Generator] = None,
                          masks: Optional[list] = None):
    """Score samples x [batch, sites, horizon]; returns (scores, features).

    features is the exact input of the final affine layer (the layer the
    consistency term inspects).  mode "train" applies dropout from rng after
    every hidden layer; appended masks allow replay.  Values outside a loose
    unit range only warn: interpolates and optimizer iterates may overshoot.
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and rng is None and cfg.dropout_p > 0:
        raise UsageError("train mode needs an rng for dropout")
    if len(x.shape) == 3:
        if x.shape[1:] != (cfg.sites, cfg.horizon):
            raise ShapeError(
                f"discriminator: x must be [batch, {cfg.sites}, {cfg.horizon}], got {x.shape}")
        h = x.reshape((x.shape[0], cfg.sites * cfg.horizon))
    elif len(x.shape) == 2 and x.shape[1] == cfg.sites * cfg.horizon:
        h = x
    else:
        raise ShapeError(f"discriminator: bad input shape {x.shape}")
    vals = x.values
    if vals.min() < -0.1 or vals.max() > 1.1:
        warnings.warn("discriminator input outside [-0.1, 1.1]", stacklevel=2)
    n_hidden = len(cfg.disc_widths)
    for i in range(n_hidden):
        h = dense_forward(h, handles[f"d.dense{i}.w"], handles[f"d.dense{i}.b"])
        if i < n_hidden - 1:
            h = layer_norm_forward(h, handles[f"d.ln{i}.gain"], handles[f"d.ln{i}.bias"],
                                   cfg.layer_norm_eps)
        h = h.leaky_relu(cfg.leak_slope)
        if mode == "train" and cfg.dropout_p > 0:
            h, mask = dropout_apply(h, cfg.dropout_p, rng)
            if masks is not None:
                masks.append(mask)
    features = h
    out = dense_forward(features, handles["d.out.w"], handles["d.out.b"])
    if cfg.critic_output == "sigmoid":
        out = out.sigmoid()
    scores = out.reshape((out.shape[0],))
    return scores, features


def generate(params: ModelParams, z_values: np.ndarray) -> np.ndarray:
    """Convenience eval-mode generator pass on plain arrays."""
    graph = Graph()
    handles = bind_params(graph, params, trainable=False, subset="g.")
    z = graph.constant(np.asarray(z_values, dtype=np.float64))
    return generator_forward(graph, handles, params.config, z).values


def criticize(params: ModelParams, x_values: np.ndarray) -> np.ndarray:
    """Convenience eval-mode critic pass on plain arrays."""
    graph = Graph()
    handles = bind_params(graph, params, trainable=False, subset="d.")
    x = graph.constant(np.asarray(x_values, dtype=np.float64))
    scores, _ = discriminator_forward(graph, handles, params.config, x, mode="eval")
    return scores.values


# -- checkpoint container ----------------------------------------------
#
# Layout (little endian):
#   magic "SCGN" | u32 version | u64 header_len | header JSON (utf-8)
#   | u32 tensor count | per tensor: u16 name_len, name, u8 ndim,
#   u32 dims..., raw float64 data | sha256 of all preceding bytes.
# The header JSON carries the canonical architecture config, iteration
# counter, seed record, and training extras (rng states etc.).


def save_params(params: ModelParams, path) -> None:
    header = {
        "config": json.loads(params.config.to_canonical_json()),
        "iteration": params.iteration,
        "seed": params.seed,
        "extras": params.extras,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
              struct.pack("<Q", len(header_bytes)), header_bytes]
    named = [("model/" + k, v) for k, v in sorted(params.tensors.items())]
    named += [("opt/" + k, v) for k, v in sorted(params.opt_tensors.items())]
    chunks.append(struct.pack("<I", len(named)))
    for name, values in named:
        values = np.ascontiguousarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise CheckpointError(f"refusing to save non-finite tensor {name!r}")
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}I", *values.shape))
        chunks.append(values.tobytes())
    blob = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(hashlib.sha256(blob).digest())


def load_params(path, expect_config: Optional[ArchitectureConfig] = None) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 48 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    offset = 4
    (version,) = struct.unpack_from("<I", body, offset); offset += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    (header_len,) = struct.unpack_from("<Q", body, offset); offset += 8
    header = json.loads(body[offset:offset + header_len].decode()); offset += header_len
    config = ArchitectureConfig.from_dict(header["config"])
    if expect_config is not None and config != expect_config:
        raise ConfigMismatchError(
            f"{path}: checkpoint architecture differs from the expected config")
    (count,) = struct.unpack_from("<I", body, offset); offset += 4
    tensors, opt_tensors = {}, {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, offset); offset += 2
        name = body[offset:offset + name_len].decode(); offset += name_len
        (ndim,) = struct.unpack_from("<B", body, offset); offset += 1
        shape = struct.unpack_from(f"<{ndim}I", body, offset); offset += 4 * ndim
        n_bytes = int(np.prod(shape)) * 8 if ndim else 8
        values = np.frombuffer(body[offset:offset + n_bytes], dtype="<f8").reshape(shape)
        offset += n_bytes
        if name.startswith("model/"):
            tensors[name[len("model/"):]] = values.copy()
        elif name.startswith("opt/"):
            opt_tensors[name[len("opt/"):]] = values.copy()
        else:
            raise CheckpointError(f"{path}: unknown tensor namespace in {name!r}")
    return ModelParams(config=config, tensors=tensors,
                       iteration=header["iteration"], seed=header["seed"],
                       opt_tensors=opt_tensors, extras=header["extras"])
