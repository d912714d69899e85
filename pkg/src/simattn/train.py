"""Joint metric + similarity-mining training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .attention import (
    MaskConfig,
    attention_maps,
    mining_loss,
    siamese_weights,
    soft_mask,
    total_loss,
    weights,
)
from .autograd import Tensor
from .data import Dataset, TupleBatch, sample_tuples, split_stratified
from .model import ConvLayer, Encoder, EncoderConfig, MetricLossConfig, encode, metric_loss, save_checkpoint

log = logging.getLogger(__name__)

LOSS_KIND = {"siamese": "contrastive", "triplet": "triplet", "quadruplet": "quadruplet"}


@dataclass
class TrainConfig:
    arch: str = "triplet"  # siamese | triplet | quadruplet
    gamma: float = 0.2
    margin: float = 0.5
    margin2: float = 0.25
    contrastive_margin: float = 1.0
    mask_alpha: float = 10.0
    mask_beta: float = 0.5
    mask_normalize: bool = True
    detach_w: bool = True
    lr: float = 1e-3
    optimizer: str = "adam"  # adam | sgd
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 40
    batch_size: int = 16
    seed: int = 0
    attention_layer_index: int = 2
    channels: tuple[int, ...] = (8, 16, 32)
    embedding_dim: int = 32
    val_per_class: int = 20

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.arch not in LOSS_KIND:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def metric(self) -> MetricLossConfig:
        return MetricLossConfig(LOSS_KIND[self.arch], self.margin, self.margin2, self.contrastive_margin)

    @property
    def mask(self) -> MaskConfig:
        return MaskConfig(self.mask_alpha, self.mask_beta, self.mask_normalize)

    def encoder_config(self, input_shape) -> EncoderConfig:
        return EncoderConfig(
            input_shape=tuple(int(s) for s in input_shape),
            layers=tuple(ConvLayer(c) for c in self.channels),
            attention_layer_index=self.attention_layer_index,
            embedding_dim=self.embedding_dim,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


@dataclass
class OptimizerState:
    kind: str
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_encoder(cls, enc: Encoder, kind: str) -> "OptimizerState":
        if kind == "sgd":
            return cls(kind)
        zeros = {k: np.zeros_like(p.data) for k, p in enc.params.items()}
        return cls(kind, zeros, {k: z.copy() for k, z in zeros.items()})


def apply_update(enc: Encoder, grads: dict[str, np.ndarray], cfg: TrainConfig, opt: OptimizerState) -> None:
    if cfg.lr == 0:
        return
    if opt.kind == "sgd":
        for k, g in grads.items():
            enc.params[k].data = enc.params[k].data - cfg.lr * g
        return
    opt.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**opt.step, 1.0 - b2**opt.step
    for k, g in grads.items():
        opt.m[k] = b1 * opt.m[k] + (1.0 - b1) * g
        opt.v[k] = b2 * opt.v[k] + (1.0 - b2) * g * g
        upd = cfg.lr * (opt.m[k] / c1) / (np.sqrt(opt.v[k] / c2) + cfg.eps)
        enc.params[k].data = enc.params[k].data - upd


@dataclass
class TupleForward:
    """Everything one forward pass over a tuple batch produces."""

    loss_ml: Tensor
    loss_sm: Tensor | None
    embeddings: tuple[Tensor, ...]
    maps: tuple[Tensor, ...]
    w: Tensor


def forward_tuples(
    enc: Encoder, ds: Dataset, batch: TupleBatch, cfg: TrainConfig, with_mining: bool = True, create_graph: bool = True
) -> TupleForward:
    """Encode, compute L_ml, attention maps, soft-mask, re-encode and L_sm."""
    if batch.arch != cfg.arch:
        raise ValueError(f"batch arch {batch.arch} != config arch {cfg.arch}")
    arity = batch.indices.shape[1]
    B = len(batch)
    x_all = Tensor._wrap(np.concatenate([batch.member_images(ds, r) for r in range(arity)]))
    f_all, A_all = encode(enc, x_all)
    fs = tuple(ag.split(f_all, [B] * arity))
    loss_ml = metric_loss(cfg.metric, fs, same=batch.same)

    if cfg.arch == "siamese":
        wv = siamese_weights(fs[0], fs[1], batch.same)
    else:
        wv = weights(cfg.arch, fs)
    if not with_mining:
        return TupleForward(loss_ml, None, fs, (), wv.w)
    # every member of a tuple is scored against the same weight vector
    w = wv.w.detach() if cfg.detach_w else wv.w
    M_all = attention_maps(f_all, A_all, ag.concat([w] * arity), create_graph=create_graph)
    maps = tuple(ag.split(M_all, [B] * arity))

    if cfg.arch == "siamese":
        pos = np.flatnonzero(batch.same)
        if len(pos) == 0:
            return TupleForward(loss_ml, Tensor._wrap(np.zeros(())), fs, maps, wv.w)
        rows = np.concatenate([pos + r * B for r in range(arity)])
        masked = soft_mask(ag.take(x_all, rows), ag.take(M_all, rows), cfg.mask)
        fstar, _ = encode(enc, masked)
        loss_sm = mining_loss("siamese", ag.split(fstar, [len(pos)] * arity))
    else:
        masked = soft_mask(x_all, M_all, cfg.mask)
        fstar, _ = encode(enc, masked)
        loss_sm = mining_loss(cfg.arch, ag.split(fstar, [B] * arity))
    return TupleForward(loss_ml, loss_sm, fs, maps, wv.w)


def step_gradients(enc: Encoder, ds: Dataset, batch: TupleBatch, cfg: TrainConfig):
    """Return ``(loss_ml, loss_sm, grads)`` for the combined objective without updating."""
    names = list(enc.params)
    params = [enc.params[k] for k in names]
    ag.reset_graph()
    if cfg.gamma == 0:
        # baseline: mining is evaluated for logging only and never enters the gradient
        out = forward_tuples(enc, ds, batch, cfg, with_mining=False, create_graph=False)
        grads = ag.grad(out.loss_ml, params)
        loss_ml = out.loss_ml.item()
        ag.reset_graph()
        loss_sm = forward_tuples(enc, ds, batch, cfg, create_graph=False).loss_sm.item()
    else:
        out = forward_tuples(enc, ds, batch, cfg)
        loss = total_loss(out.loss_ml, out.loss_sm, cfg.gamma)
        grads = ag.grad(loss, params)
        loss_ml, loss_sm = out.loss_ml.item(), out.loss_sm.item()
    ag.reset_graph()
    if not (math.isfinite(loss_ml) and math.isfinite(loss_sm)):
        raise FloatingPointError(f"non-finite loss: L_ml={loss_ml} L_sm={loss_sm}")
    return loss_ml, loss_sm, {k: g.data for k, g in zip(names, grads)}


def train_step(enc: Encoder, ds: Dataset, batch: TupleBatch, cfg: TrainConfig, opt: OptimizerState):
    """One optimizer update on ``L_ml + gamma * L_sm``; returns the pre-update losses."""
    loss_ml, loss_sm, grads = step_gradients(enc, ds, batch, cfg)
    apply_update(enc, grads, cfg, opt)
    return loss_ml, loss_sm


def embed(enc: Encoder, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = []
    with ag.no_grad():
        for i in range(0, len(images), chunk):
            f, _ = encode(enc, Tensor._wrap(images[i : i + chunk]))
            out.append(f.data)
    return np.concatenate(out) if out else np.zeros((0, enc.config.embedding_dim))


def validation_recall(enc: Encoder, val: Dataset, K: int = 1) -> float:
    from .evaluate import RetrievalIndex, recall_at_k

    emb = embed(enc, val.images)
    return recall_at_k(RetrievalIndex(emb, val.labels), None, None, K)


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    return max(1, math.ceil(n_train / batch_size))


def fit(enc: Encoder, dataset: Dataset, cfg: TrainConfig, checkpoint_dir=None, log_path=None) -> list[dict]:
    """Train for ``cfg.epochs`` epochs; one log record per epoch."""
    train, val = split_stratified(dataset, cfg.val_per_class, cfg.seed)
    opt = OptimizerState.for_encoder(enc, cfg.optimizer)
    n_steps = steps_per_epoch(len(train), cfg.batch_size)
    records: list[dict] = []
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            ml, sm = [], []
            for step in range(n_steps):
                batch = sample_tuples(train, cfg.arch, cfg.batch_size, [cfg.seed, epoch, step])
                a, b = train_step(enc, train, batch, cfg, opt)
                ml.append(a)
                sm.append(b)
            rec = {
                "epoch": epoch + 1,
                "loss_ml": float(np.mean(ml)),
                "loss_sm": float(np.mean(sm)),
                "recall_at_1": validation_recall(enc, val),
            }
            records.append(rec)
            log.info("epoch %d L_ml=%.4f L_sm=%.4f R@1=%.4f", rec["epoch"], rec["loss_ml"], rec["loss_sm"], rec["recall_at_1"])
            if log_file is not None:
                log_file.write(json.dumps(rec, sort_keys=True) + "\n")
                log_file.flush()
            if checkpoint_dir is not None:
                save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch + 1:03d}.sattn", enc.params)
    finally:
        if log_file is not None:
            log_file.close()
    return records
