"""Similarity attention: weight vectors, sample scores, gradient attention maps,
soft-masking and the similarity-mining losses.

All functions accept either single samples (``f: d``, ``A: c x m x n``,
``x: c x H x W``) or batches with a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autograd as ag
from .autograd import Tensor

ARCH_ARITY = {"siamese_same": 2, "siamese_diff": 2, "triplet": 3, "quadruplet": 4}


@dataclass
class WeightVector:
    w: Tensor
    parts: dict[str, Tensor] = field(default_factory=dict)


@dataclass
class AttentionMap:
    M: Tensor
    source: object = None
    arch: str | None = None


@dataclass(frozen=True)
class MaskConfig:
    alpha: float = 10.0
    beta: float = 0.5
    normalize: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("mask alpha must be positive")


def _check_members(arch: str, fs) -> tuple[Tensor, ...]:
    if arch not in ARCH_ARITY:
        raise ValueError(f"unknown architecture {arch!r}")
    fs = tuple(fs)
    if len(fs) != ARCH_ARITY[arch]:
        raise ValueError(f"{arch} takes {ARCH_ARITY[arch]} embeddings, got {len(fs)}")
    shape = fs[0].shape
    for f in fs[1:]:
        if f.shape != shape:
            raise ValueError(f"embedding shape mismatch {shape} vs {f.shape}")
    return fs


def weights(arch: str, fs) -> WeightVector:
    """Per-dimension relevance of the embedding for this tuple's similarity decision."""
    fs = _check_members(arch, fs)
    if arch == "siamese_same":
        wp = ag.one_minus(ag.abs(ag.sub(fs[0], fs[1])))
        return WeightVector(wp, {"wp": wp})
    if arch == "siamese_diff":
        wn = ag.abs(ag.sub(fs[0], fs[1]))
        return WeightVector(wn, {"wn": wn})
    if arch == "triplet":
        fa, fp, fn = fs
        wp = ag.one_minus(ag.abs(ag.sub(fa, fp)))
        wn = ag.abs(ag.sub(fa, fn))
        return WeightVector(ag.mul(wp, wn), {"wp": wp, "wn": wn})
    fa, fp, fn1, fn2 = fs
    w1 = ag.one_minus(ag.abs(ag.sub(fa, fp)))
    w2 = ag.abs(ag.sub(fa, fn1))
    w3 = ag.abs(ag.sub(fa, fn2))
    return WeightVector(ag.mul(ag.mul(w1, w2), w3), {"w1": w1, "w2": w2, "w3": w3})


def siamese_weights(f1: Tensor, f2: Tensor, same) -> WeightVector:
    """Row-wise Siamese weights for a batch mixing positive and negative pairs."""
    wp = weights("siamese_same", (f1, f2)).w
    wn = weights("siamese_diff", (f1, f2)).w
    flag = np.broadcast_to(np.asarray(same, dtype=np.float64).reshape(-1, *([1] * (f1.ndim - 1))), f1.shape)
    flag = Tensor._wrap(np.ascontiguousarray(flag))
    w = ag.add(ag.mul(wp, flag), ag.mul(wn, ag.one_minus(flag)))
    return WeightVector(w, {"wp": wp, "wn": wn})


def sample_scores(w: WeightVector | Tensor, fs, detach: bool = True) -> tuple[Tensor, ...]:
    """``s_i = w . f_i`` for each member. ``w`` is treated as a constant unless ``detach=False``."""
    wt = w.w if isinstance(w, WeightVector) else w
    if detach:
        wt = wt.detach()
    out = []
    for f in fs:
        if f.shape != wt.shape:
            raise ValueError(f"score: embedding shape {f.shape} != weight shape {wt.shape}")
        out.append(ag.sum(ag.mul(wt, f), axis=-1))
    return tuple(out)


def attention_from_grad(dA: Tensor, A: Tensor) -> Tensor:
    """``relu(sum_k GAP(dA_k) * A_k)`` over the channel axis (third from last)."""
    alpha = ag.global_avg_pool(dA)  # ... x c
    a = ag.broadcast_to(ag.reshape(alpha, alpha.shape + (1, 1)), A.shape)
    return ag.relu(ag.sum(ag.mul(a, A), axis=-3))


def attention_map(s: Tensor, A: Tensor, create_graph: bool = False, source=None, arch=None) -> AttentionMap:
    """Attention of score ``s`` on feature map ``A``.

    A score that does not depend on ``A`` gives an all-zero map; a score or
    map outside the active graph raises ``GraphError``.
    """
    seed = None if s.size == 1 else Tensor._wrap(np.ones(s.shape))
    (dA,) = ag.grad(s, [A], grad_outputs=seed, create_graph=create_graph)
    return AttentionMap(attention_from_grad(dA, A), source, arch)


def attention_maps(f: Tensor, A: Tensor, w: Tensor, create_graph: bool = False) -> Tensor:
    """Batched attention: the gradient of ``w . f`` w.r.t. ``A`` with ``w`` held fixed.

    ``w`` enters only as the cotangent of a vector-Jacobian product, so map
    values never depend on whether ``w`` is itself a graph node; when it is
    (and ``create_graph``), the map stays differentiable through ``w``.
    """
    (dA,) = ag.grad(f, [A], grad_outputs=w, create_graph=create_graph)
    return attention_from_grad(dA, A)


def normalize_map(M: Tensor) -> Tensor:
    """Divide each map by its maximum; maps whose maximum is 0 are left as is."""
    mx = ag.max(M, axis=(-2, -1), keepdims=True)
    zero = Tensor._wrap((mx.data <= 0).astype(np.float64))
    return ag.div(M, ag.broadcast_to(ag.add(mx, zero), M.shape))


@lru_cache(maxsize=32)
def _interp_matrix(src: int, dst: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape ``dst x src``."""
    R = np.zeros((dst, src))
    if src == 1 or dst == 1:
        R[:, 0] = 1.0
        return R
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    R[np.arange(dst), lo] = 1.0 - frac
    R[np.arange(dst), lo + 1] += frac
    R.setflags(write=False)
    return R


def upsample_bilinear(M: Tensor, H: int, W: int) -> Tensor:
    """Bilinear resize of the trailing ``m x n`` plane to ``H x W`` (corners aligned)."""
    m, n = M.shape[-2:]
    Ry = Tensor._wrap(_interp_matrix(m, H))
    RxT = Tensor._wrap(np.ascontiguousarray(_interp_matrix(n, W).T))
    return ag.matmul(ag.matmul(Ry, M), RxT)


def soft_mask(x: Tensor, M: AttentionMap | Tensor, cfg: MaskConfig = MaskConfig()) -> Tensor:
    """Erase the attended region: ``x * (1 - sigmoid(alpha * (M_up - beta)))`` per channel."""
    if not cfg.alpha > 0:
        raise ValueError("mask alpha must be positive")
    Mt = M.M if isinstance(M, AttentionMap) else M
    H, W = x.shape[-2:]
    if cfg.normalize:
        Mt = normalize_map(Mt)
    up = upsample_bilinear(Mt, H, W)
    keep = ag.one_minus(ag.sigmoid(ag.mul_scalar(ag.add_scalar(up, -cfg.beta), cfg.alpha)))
    keep = ag.reshape(keep, keep.shape[:-2] + (1, H, W))
    return ag.mul(x, ag.broadcast_to(keep, x.shape))


def _triplet_mining(fa: Tensor, fp: Tensor, fn: Tensor) -> Tensor:
    return ag.abs(ag.sub(ag.l2_distance(fa, fp), ag.l2_distance(fa, fn)))


def mining_loss(arch: str, masked_embeddings) -> Tensor:
    """Similarity-mining loss on re-encoded masked images, averaged over the batch.

    ``arch`` is ``siamese`` (positive pairs only), ``triplet`` or ``quadruplet``.
    """
    fs = tuple(masked_embeddings)
    if arch in ("siamese", "siamese_same"):
        if len(fs) != 2:
            raise ValueError("siamese mining takes 2 embeddings")
        per = ag.neg(ag.l2_distance(fs[0], fs[1]))
    elif arch == "triplet":
        if len(fs) != 3:
            raise ValueError("triplet mining takes 3 embeddings")
        per = _triplet_mining(*fs)
    elif arch == "quadruplet":
        if len(fs) != 4:
            raise ValueError("quadruplet mining takes 4 embeddings")
        fa, fp, fn1, fn2 = fs
        per = ag.add(_triplet_mining(fa, fp, fn1), _triplet_mining(fa, fp, fn2))
    else:
        raise ValueError(f"no mining loss for {arch!r}")
    return ag.mean(per)


def total_loss(loss_ml: Tensor, loss_sm: Tensor, gamma: float) -> Tensor:
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return ag.add(loss_ml, ag.mul_scalar(loss_sm, gamma))
