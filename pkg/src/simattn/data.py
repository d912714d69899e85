"""Procedural glyph dataset with ground-truth part masks, and tuple sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATA_MAGIC = b"SDATA1"

GLYPH_NAMES = ("cross", "ring", "L", "T", "diamond", "bars", "checker", "dot_grid")


def glyph(name: str, size: int = 12) -> np.ndarray:
    """Binary ``size x size`` pattern."""
    s = size
    g = np.zeros((s, s))
    yy, xx = np.mgrid[0:s, 0:s]
    c = (s - 1) / 2.0
    t = max(1, s // 6)  # stroke width
    if name == "cross":
        lo = s // 2 - t // 2 - t % 2
        g[lo : lo + t + 1, :] = 1
        g[:, lo : lo + t + 1] = 1
    elif name == "ring":
        r = np.hypot(yy - c, xx - c)
        g[(r <= c) & (r >= c - t - 0.5)] = 1
    elif name == "L":
        g[:, : t + 1] = 1
        g[-(t + 1) :, :] = 1
    elif name == "T":
        g[: t + 1, :] = 1
        lo = s // 2 - t // 2 - t % 2
        g[:, lo : lo + t + 1] = 1
    elif name == "diamond":
        d = np.abs(yy - c) + np.abs(xx - c)
        g[(d <= c + 0.5) & (d >= c - t - 0.5)] = 1
    elif name == "bars":
        step = max(2, s // 3)
        for x0 in range(0, s, step):
            g[:, x0 : x0 + step // 2] = 1
    elif name == "checker":
        b = max(1, s // 4)
        g[((yy // b) + (xx // b)) % 2 == 0] = 1
    elif name == "dot_grid":
        step = max(2, s // 3)
        for y0 in range(step // 4, s, step):
            for x0 in range(step // 4, s, step):
                g[y0 : y0 + max(1, step // 2), x0 : x0 + max(1, step // 2)] = 1
    else:
        raise ValueError(f"unknown glyph {name!r}")
    return g


@dataclass(frozen=True)
class SyntheticSpec:
    k: int = 8
    image_size: int = 64
    channels: int = 1
    glyph_size: int = 12
    glyphs: tuple[str, ...] | None = None  # defaults to the first k of GLYPH_NAMES
    clutter: int = 6  # distractor blobs per image
    clutter_size: int = 6
    noise: float = 0.05
    seed: int = 0

    def glyph_names(self) -> tuple[str, ...]:
        names = self.glyphs if self.glyphs is not None else GLYPH_NAMES[: self.k]
        if len(names) != self.k:
            raise ValueError(f"need {self.k} glyphs, only {len(names)} available")
        return tuple(names)

    def validate(self) -> None:
        if self.k < 2:
            raise ValueError("need at least 2 classes")
        if self.glyph_size > self.image_size or self.clutter_size > self.image_size:
            raise ValueError("glyph larger than image")
        pats = [glyph(n, self.glyph_size).tobytes() for n in self.glyph_names()]
        if len(set(pats)) != len(pats):
            raise ValueError("class glyphs must be distinct")


@dataclass
class Sample:
    image: np.ndarray  # c x H x W in [0, 1]
    label: int
    part_mask: np.ndarray  # H x W, uint8 0/1


@dataclass
class Dataset:
    images: np.ndarray  # N x c x H x W
    labels: np.ndarray  # N, values in 1..k
    part_masks: np.ndarray  # N x H x W uint8
    k: int
    spec: SyntheticSpec | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), self.part_masks[i])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.part_masks[idx], self.k, self.spec)

    def class_counts(self) -> dict[int, int]:
        labels, counts = np.unique(self.labels, return_counts=True)
        return {int(a): int(b) for a, b in zip(labels, counts)}


def _render(spec: SyntheticSpec, pattern: np.ndarray, rng: np.random.Generator):
    S, gs, cs = spec.image_size, spec.glyph_size, spec.clutter_size
    canvas = np.zeros((S, S))
    for _ in range(spec.clutter):
        blob = (rng.random((cs, cs)) < 0.5).astype(np.float64)
        y, x = rng.integers(0, S - cs + 1, size=2)
        np.maximum(canvas[y : y + cs, x : x + cs], blob, out=canvas[y : y + cs, x : x + cs])
    y, x = rng.integers(0, S - gs + 1, size=2)
    np.maximum(canvas[y : y + gs, x : x + gs], pattern, out=canvas[y : y + gs, x : x + gs])
    mask = np.zeros((S, S), dtype=np.uint8)
    mask[y : y + gs, x : x + gs] = 1
    img = np.repeat(canvas[None], spec.channels, axis=0)
    if spec.noise > 0:
        img = np.clip(img + spec.noise * rng.uniform(-1.0, 1.0, size=img.shape), 0.0, 1.0)
    return img, mask


def generate(spec: SyntheticSpec, n_per_class: int) -> Dataset:
    """``k * n_per_class`` samples ordered by class; each sample has its own seeded stream."""
    spec.validate()
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    patterns = [glyph(n, spec.glyph_size) for n in spec.glyph_names()]
    images, labels, masks = [], [], []
    for c in range(spec.k):
        for i in range(n_per_class):
            rng = np.random.default_rng([spec.seed, c, i])
            img, mask = _render(spec, patterns[c], rng)
            images.append(img)
            labels.append(c + 1)
            masks.append(mask)
    return Dataset(np.stack(images), np.array(labels, dtype=np.int64), np.stack(masks), spec.k, spec)


def split_stratified(ds: Dataset, n_val_per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded per-class split into (train, validation)."""
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in sorted(ds.class_counts()):
        idx = np.flatnonzero(ds.labels == c)
        if n_val_per_class >= len(idx):
            raise ValueError(f"class {c} has {len(idx)} samples, cannot hold out {n_val_per_class}")
        perm = rng.permutation(idx)
        val_idx.extend(perm[:n_val_per_class])
        train_idx.extend(perm[n_val_per_class:])
    return ds.subset(np.sort(train_idx)), ds.subset(np.sort(val_idx))


# --------------------------------------------------------------------------
# file format


def save_dataset(path, ds: Dataset) -> None:
    """SDATA1: magic, u32 header (k, n, H, W, c), then per sample u32 label, f64 image, u8 mask."""
    n, c, H, W = ds.images.shape
    parts = [DATA_MAGIC, struct.pack("<5I", ds.k, n, H, W, c)]
    img = np.ascontiguousarray(ds.images, dtype="<f8")
    msk = np.ascontiguousarray(ds.part_masks, dtype=np.uint8)
    for i in range(n):
        parts.append(struct.pack("<I", int(ds.labels[i])))
        parts.append(img[i].tobytes())
        parts.append(msk[i].tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if not buf.startswith(DATA_MAGIC):
        raise ValueError(f"{path}: not an SDATA1 file")
    off = len(DATA_MAGIC)
    k, n, H, W, c = struct.unpack_from("<5I", buf, off)
    off += 20
    rec = 4 + 8 * c * H * W + H * W
    if len(buf) != off + n * rec:
        raise ValueError(f"{path}: size does not match header")
    dt = np.dtype([("label", "<u4"), ("image", "<f8", (c, H, W)), ("mask", "u1", (H, W))])
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=off)
    return Dataset(
        arr["image"].astype(np.float64),
        arr["label"].astype(np.int64),
        arr["mask"].copy(),
        k,
    )


# --------------------------------------------------------------------------
# tuple sampling

TUPLE_ARITY = {"siamese": 2, "triplet": 3, "quadruplet": 4}


@dataclass
class TupleBatch:
    arch: str
    indices: np.ndarray  # B x arity, dataset row indices
    same: np.ndarray  # B bools; for siamese marks positive pairs, True elsewhere

    def __len__(self) -> int:
        return len(self.indices)

    def member_images(self, ds: Dataset, role: int) -> np.ndarray:
        return ds.images[self.indices[:, role]]

    def labels(self, ds: Dataset) -> np.ndarray:
        return ds.labels[self.indices]


def sample_tuples(ds: Dataset, arch: str, batch: int, rng_seed) -> TupleBatch:
    """Uniform tuples: anchor/positive share a class (distinct samples), negatives
    come from other classes; quadruplet negatives come from two distinct classes.

    Siamese batches alternate positive and negative pairs, starting positive.
    """
    if arch not in TUPLE_ARITY:
        raise ValueError(f"unknown architecture {arch!r}")
    by_class = {c: np.flatnonzero(ds.labels == c) for c in np.unique(ds.labels)}
    classes = np.array(sorted(by_class))
    need_classes = 3 if arch == "quadruplet" else 2
    if len(classes) < need_classes:
        raise ValueError(f"{arch} sampling needs at least {need_classes} classes")
    if any(len(v) < 2 for v in by_class.values()):
        raise ValueError("every class needs at least 2 samples")
    rng = np.random.default_rng(rng_seed)
    rows, same = [], []
    for b in range(batch):
        ca = rng.choice(classes)
        a, p = rng.choice(by_class[ca], size=2, replace=False)
        others = classes[classes != ca]
        if arch == "siamese":
            if b % 2 == 0:
                rows.append((a, p))
                same.append(True)
            else:
                rows.append((a, rng.choice(by_class[rng.choice(others)])))
                same.append(False)
        elif arch == "triplet":
            rows.append((a, p, rng.choice(by_class[rng.choice(others)])))
            same.append(True)
        else:
            c1, c2 = rng.choice(others, size=2, replace=False)
            rows.append((a, p, rng.choice(by_class[c1]), rng.choice(by_class[c2])))
            same.append(True)
    return TupleBatch(arch, np.array(rows, dtype=np.int64), np.array(same, dtype=bool))
