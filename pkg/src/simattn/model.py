"""Convolutional encoder exposing an intermediate feature map, and baseline metric losses."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor

CHECKPOINT_MAGIC = b"SATTN1"


@dataclass(frozen=True)
class ConvLayer:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    activation: str = "relu"  # relu | none
    pool: str | None = "max2x2"  # max2x2 | avg2x2 | None


@dataclass(frozen=True)
class EncoderConfig:
    input_shape: tuple[int, int, int] = (1, 64, 64)
    layers: tuple[ConvLayer, ...] = (ConvLayer(8), ConvLayer(16), ConvLayer(32))
    attention_layer_index: int = 2
    embedding_dim: int = 32
    bounded: bool = True  # sigmoid on the embedding, keeps f in (0, 1)^d

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """Output shape (c, h, w) of every conv block; raises on inconsistent arithmetic."""
        c, h, w = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            k, s, p = layer.kernel, layer.stride, layer.pad
            if k > h + 2 * p or k > w + 2 * p or s < 1:
                raise ValueError(f"layer {i}: kernel {k} does not fit {h}x{w} with pad {p}")
            h, w = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            if layer.pool is not None:
                if h % 2 or w % 2:
                    raise ValueError(f"layer {i}: cannot 2x2-pool odd size {h}x{w}")
                h, w = h // 2, w // 2
            c = layer.out_channels
            shapes.append((c, h, w))
        return shapes

    def validate(self) -> None:
        shapes = self.layer_shapes()
        if not 0 <= self.attention_layer_index < len(self.layers):
            raise ValueError("attention_layer_index out of range")
        _, m, n = shapes[self.attention_layer_index]
        if m < 4 or n < 4:
            raise ValueError(f"attention map would be {m}x{n}; need at least 4x4")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be positive")

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [vars(layer).copy() for layer in self.layers],
            "attention_layer_index": self.attention_layer_index,
            "embedding_dim": self.embedding_dim,
            "bounded": self.bounded,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(
            input_shape=tuple(d["input_shape"]),
            layers=tuple(ConvLayer(**layer) for layer in d["layers"]),
            attention_layer_index=d["attention_layer_index"],
            embedding_dim=d["embedding_dim"],
            bounded=d.get("bounded", True),
        )


@dataclass
class Encoder:
    config: EncoderConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0) -> "Encoder":
        """He-normal conv/linear weights, zero biases."""
        config.validate()
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        c_in = config.input_shape[0]
        for i, layer in enumerate(config.layers):
            fan_in = c_in * layer.kernel**2
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(layer.out_channels, c_in, layer.kernel, layer.kernel))
            params[f"conv{i}.weight"] = Tensor(w, requires_grad=True)
            params[f"conv{i}.bias"] = Tensor(np.zeros(layer.out_channels), requires_grad=True)
            c_in = layer.out_channels
        d = config.embedding_dim
        params["embed.weight"] = Tensor(rng.normal(0.0, np.sqrt(2.0 / c_in), size=(d, c_in)), requires_grad=True)
        params["embed.bias"] = Tensor(np.zeros(d), requires_grad=True)
        return cls(config, params)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ValueError("checkpoint parameter names do not match the encoder")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k] = Tensor(arr, requires_grad=True)


def encode(enc: Encoder, x: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(f, A)``: the embedding and the attention-layer feature map.

    Accepts a single ``c x H x W`` image or a batch ``N x c x H x W``.
    """
    cfg = enc.config
    single = x.ndim == 3
    if single:
        x = ag.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1:] != tuple(cfg.input_shape):
        raise ValueError(f"encode: input shape {x.shape} does not match {cfg.input_shape}")
    h = x
    A = None
    for i, layer in enumerate(cfg.layers):
        h = ag.conv2d(h, enc.params[f"conv{i}.weight"], enc.params[f"conv{i}.bias"], layer.stride, layer.pad)
        if layer.activation == "relu":
            h = ag.relu(h)
        if layer.pool is not None:
            h = ag.pool(layer.pool, h)
        if i == cfg.attention_layer_index:
            A = h
            if single:
                # the returned map must be an ancestor of f, so route the forward through it
                A = ag.reshape(h, h.shape[1:])
                h = ag.reshape(A, h.shape)
    pooled = ag.global_avg_pool(h)  # N x C
    W, b = enc.params["embed.weight"], enc.params["embed.bias"]
    z = ag.add(ag.matmul(pooled, ag.swap_last(W)), ag.broadcast_to(ag.reshape(b, (1, -1)), (pooled.shape[0], b.shape[0])))
    f = ag.sigmoid(z) if cfg.bounded else z
    if single:
        f = ag.reshape(f, f.shape[1:])
    return f, A


# --------------------------------------------------------------------------
# metric losses


@dataclass(frozen=True)
class MetricLossConfig:
    kind: str = "triplet"  # contrastive | triplet | quadruplet
    margin: float = 0.5
    margin2: float = 0.25
    contrastive_margin: float = 1.0

    def __post_init__(self):
        if self.kind not in ARITY:
            raise ValueError(f"unknown metric loss {self.kind!r}")
        if min(self.margin, self.margin2, self.contrastive_margin) < 0:
            raise ValueError("margins must be non-negative")


ARITY = {"contrastive": 2, "triplet": 3, "quadruplet": 4}


def _hinge(x: Tensor) -> Tensor:
    return ag.relu(x)


def metric_loss(cfg: MetricLossConfig, embeddings, same=None) -> Tensor:
    """Batch-mean baseline loss over a tuple of embeddings.

    Each member is ``d`` or ``B x d``. ``same`` (contrastive only) flags
    same-class pairs, one bool per batch row.
    """
    embeddings = tuple(embeddings)
    if len(embeddings) != ARITY[cfg.kind]:
        raise ValueError(f"{cfg.kind} loss takes {ARITY[cfg.kind]} embeddings, got {len(embeddings)}")
    if cfg.kind == "triplet":
        fa, fp, fn = embeddings
        per = _hinge(ag.add_scalar(ag.sub(ag.l2_distance(fa, fp), ag.l2_distance(fa, fn)), cfg.margin))
    elif cfg.kind == "quadruplet":
        fa, fp, fn1, fn2 = embeddings
        d_ap = ag.l2_distance(fa, fp)
        t1 = _hinge(ag.add_scalar(ag.sub(d_ap, ag.l2_distance(fa, fn1)), cfg.margin))
        t2 = _hinge(ag.add_scalar(ag.sub(d_ap, ag.l2_distance(fn1, fn2)), cfg.margin2))
        per = ag.add(t1, t2)
    else:
        f1, f2 = embeddings
        if same is None:
            raise ValueError("contrastive loss needs same-class flags")
        d = ag.l2_distance(f1, f2)
        flag = np.broadcast_to(np.asarray(same, dtype=np.float64), d.shape).copy()
        pos = ag.mul(ag.mul(d, d), Tensor._wrap(flag))
        gap = _hinge(ag.add_scalar(ag.neg(d), cfg.contrastive_margin))
        per = ag.add(pos, ag.mul(ag.mul(gap, gap), Tensor._wrap(1.0 - flag)))
    return ag.mean(per)


# --------------------------------------------------------------------------
# checkpoint io


def save_checkpoint(path, params: dict[str, Tensor | np.ndarray]) -> None:
    """SATTN1: magic, then per parameter name length, name, rank, dims, little-endian f64 values."""
    parts = [CHECKPOINT_MAGIC]
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a SATTN1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = 8 * count
            if pos + nbytes > len(buf):
                raise ValueError("truncated")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(dims)
            pos += nbytes
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint ({exc})") from None
    return out
