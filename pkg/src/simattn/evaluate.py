"""Retrieval recall, attention localization and one-shot segmentation from attention cues."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .attention import attention_map, normalize_map, sample_scores, upsample_bilinear, weights
from .autograd import Tensor
from .data import Dataset, Sample
from .model import Encoder, encode


@dataclass
class RetrievalIndex:
    embeddings: np.ndarray  # N_g x d
    labels: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.labels):
            raise ValueError("need one embedding row per gallery label")


def _pairwise_dist(q: np.ndarray, g: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = np.empty((len(q), len(g)))
    for i in range(0, len(q), chunk):
        diff = q[i : i + chunk, None, :] - g[None, :, :]
        out[i : i + chunk] = np.sqrt(np.sum(diff * diff, axis=-1))
    return out


def recall_at_k(index: RetrievalIndex, queries, query_labels, K: int, query_ids=None) -> float:
    """Fraction of queries with a same-class item among their ``K`` nearest gallery items.

    ``queries=None`` queries the gallery against itself, leaving each item out.
    ``query_ids`` marks which gallery row (or -1) each external query is.
    Ties in distance are broken by gallery index.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if queries is None:
        queries, query_labels = index.embeddings, index.labels
        query_ids = np.arange(len(index.labels))
    queries = np.asarray(queries, dtype=np.float64)
    query_labels = np.asarray(query_labels)
    if query_ids is None:
        query_ids = np.full(len(queries), -1)
    query_ids = np.asarray(query_ids)
    available = len(index.labels) - (1 if np.any(query_ids >= 0) else 0)
    if K > available:
        raise ValueError(f"K={K} exceeds gallery size {available}")
    if len(queries) == 0:
        return 0.0
    dist = _pairwise_dist(queries, index.embeddings)
    rows = np.flatnonzero(query_ids >= 0)
    dist[rows, query_ids[rows]] = np.inf
    order = np.argsort(dist, axis=1, kind="stable")[:, :K]
    hits = np.any(index.labels[order] == query_labels[:, None], axis=1)
    return float(np.mean(hits))


def binarize_quantile(M: np.ndarray, quantile: float) -> np.ndarray:
    """Pixels strictly above the ``quantile`` order statistic of ``M`` itself.

    Uses the lower order statistic rather than an interpolated value so the
    result only depends on the ordering of ``M`` (hence positive rescaling
    cannot change it).
    """
    if not 0.0 < quantile < 1.0:
        raise ValueError("quantile must be in (0, 1)")
    if not np.any(M):
        return np.zeros(M.shape, dtype=bool)
    t = np.quantile(M, quantile, method="lower")
    return M > t


def iou(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = pred.astype(bool), truth.astype(bool)
    union = np.count_nonzero(pred | truth)
    if union == 0:
        return 0.0
    return np.count_nonzero(pred & truth) / union


def attention_iou(M: np.ndarray, part_mask: np.ndarray, threshold_quantile: float = 0.8) -> float:
    """IoU of the quantile-binarized (already upsampled) map against the part mask."""
    M = np.asarray(M, dtype=np.float64)
    if M.shape != part_mask.shape:
        raise ValueError(f"map shape {M.shape} != mask shape {part_mask.shape}")
    if not np.any(M):
        return 0.0
    return iou(binarize_quantile(M, threshold_quantile), part_mask)


@dataclass
class Baseline:
    """Mean IoU of a reference procedure, with per-item spread and standard error."""

    mean: float
    std: float
    sem: float


def random_map_baseline(part_masks: np.ndarray, quantile: float, reps: int = 200, seed: int = 0) -> Baseline:
    """Monte-Carlo IoU of uniform-random maps against ``part_masks``.

    ``std`` is the spread of a single random map's IoU, ``sem`` that of the
    mean over the whole mask set.
    """
    rng = np.random.default_rng(seed)
    vals = np.empty((reps, len(part_masks)))
    for r in range(reps):
        for j, m in enumerate(part_masks):
            vals[r, j] = attention_iou(rng.random(m.shape), m, quantile)
    return Baseline(float(vals.mean()), float(vals.std(ddof=1)), float(vals.mean(axis=1).std(ddof=1)))


def upsampled_maps(M: Tensor, H: int, W: int, normalize: bool = True) -> np.ndarray:
    with ag.no_grad():
        if normalize:
            M = normalize_map(M)
        return upsample_bilinear(M, H, W).data


def tuple_attention(enc: Encoder, images, arch: str):
    """Attention maps (model resolution), weight vector and scores for one tuple.

    ``images`` is a sequence of ``c x H x W`` arrays; ``arch`` one of the
    similarity-attention architectures (``siamese_same``, ``siamese_diff``,
    ``triplet``, ``quadruplet``).
    """
    ag.reset_graph()
    outs = [encode(enc, Tensor._wrap(np.asarray(x, dtype=np.float64))) for x in images]
    fs = [f for f, _ in outs]
    wv = weights(arch, fs)
    scores = sample_scores(wv, fs, detach=True)
    maps = []
    for s, (_, A) in zip(scores, outs):
        maps.append(attention_map(s, A, create_graph=False, arch=arch).M.detach())
    res = (maps, wv.w.detach(), [float(s.item()) for s in scores], [f.detach() for f in fs])
    ag.reset_graph()
    return res


def embed_attention_iou(enc: Encoder, ds: Dataset, triplets: np.ndarray, quantile: float = 0.8) -> np.ndarray:
    """Per-image attention IoU for every member of each (a, p, n) index triple."""
    H, W = ds.images.shape[-2:]
    vals = []
    for row in triplets:
        maps, *_ = tuple_attention(enc, [ds.images[i] for i in row], "triplet")
        for i, M in zip(row, maps):
            vals.append(attention_iou(upsampled_maps(M, H, W), ds.part_masks[i], quantile))
    return np.array(vals)


@dataclass
class SegmentationResult:
    mask: np.ndarray
    iou: float
    label: int


def one_shot_segment(enc: Encoder, test: Sample, support: Sample, quantile: float = 0.8) -> SegmentationResult:
    """Segment ``test`` by binarizing its positive-pair attention with ``support``."""
    maps, *_ = tuple_attention(enc, [test.image, support.image], "siamese_same")
    H, W = test.image.shape[-2:]
    up = upsampled_maps(maps[0], H, W)
    mask = binarize_quantile(up, quantile)
    return SegmentationResult(mask, iou(mask, test.part_mask), int(test.label))


def segmentation_pairs(ds: Dataset, n_pairs: int, seed: int) -> np.ndarray:
    """Seeded (test, support) index pairs drawn from the same class."""
    rng = np.random.default_rng(seed)
    classes = np.unique(ds.labels)
    pairs = []
    for _ in range(n_pairs):
        c = rng.choice(classes)
        t, s = rng.choice(np.flatnonzero(ds.labels == c), size=2, replace=False)
        pairs.append((t, s))
    return np.array(pairs, dtype=np.int64)


def segment_pairs(enc: Encoder, ds: Dataset, pairs: np.ndarray, quantile: float = 0.8) -> list[SegmentationResult]:
    return [one_shot_segment(enc, ds[int(t)], ds[int(s)], quantile) for t, s in pairs]
