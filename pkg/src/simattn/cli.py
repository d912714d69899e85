"""Command-line front end: gen-data, train, eval, explain, segment, replay.

Every command writes a JSON run manifest recording its flags, input hashes
and output hashes; ``replay`` re-runs manifests and checks the outputs are
byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import SyntheticSpec, generate, load_dataset, sample_tuples, save_dataset, split_stratified
from .evaluate import (
    RetrievalIndex,
    embed_attention_iou,
    recall_at_k,
    segment_pairs,
    segmentation_pairs,
    tuple_attention,
    upsampled_maps,
)
from .model import Encoder, EncoderConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, embed, fit

log = logging.getLogger("simattn")

ARCH_ATTENTION = {"triplet": "triplet", "quadruplet": "quadruplet"}
EXPLAIN_ARITY = {"siamese": 2, "triplet": 3, "quadruplet": 4}


class CLIError(Exception):
    pass


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _int_list(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {s!r}")


def write_pgm(path, img: np.ndarray) -> None:
    """Binary P5 greymap, maxval 255."""
    img = np.asarray(img, dtype=np.uint8)
    H, W = img.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError(f"{path}: not an 8-bit P5 file")
    W, H = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(H, W)


def map_to_pixels(M_up: np.ndarray) -> np.ndarray:
    """``round(255 * M / max M)``; an all-zero map stays zero."""
    mx = M_up.max()
    if mx <= 0:
        return np.zeros(M_up.shape, dtype=np.uint8)
    return np.clip(np.round(255.0 * M_up / mx), 0, 255).astype(np.uint8)


def format_metrics(metrics: dict) -> str:
    lines = []
    for k, v in metrics.items():
        lines.append(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
    return "\n".join(lines) + "\n"


def _write_manifest(path, command: str, args: dict, inputs: list, outputs: list, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "args": args,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# model sidecar: the checkpoint holds only tensors, the config lives next to it


def _sidecar(ckpt) -> Path:
    return Path(str(ckpt) + ".json")


def load_model(ckpt) -> tuple[Encoder, TrainConfig]:
    ckpt = Path(ckpt)
    if not ckpt.exists():
        raise CLIError(f"checkpoint not found: {ckpt}")
    side = _sidecar(ckpt)
    if not side.exists():
        raise CLIError(f"missing model config {side}")
    meta = json.loads(side.read_text())
    enc = Encoder.init(EncoderConfig.from_dict(meta["encoder"]), seed=0)
    enc.load_state(load_checkpoint(ckpt))
    return enc, TrainConfig(**meta["train"])


def _load_data(path):
    if not Path(path).exists():
        raise CLIError(f"dataset not found: {path}")
    return load_dataset(path)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(a) -> int:
    spec = SyntheticSpec(
        k=a.classes,
        image_size=a.image_size,
        channels=a.channels,
        glyph_size=a.glyph_size,
        clutter=a.clutter,
        clutter_size=a.clutter_size,
        noise=a.noise,
        seed=a.seed,
    )
    try:
        ds = generate(spec, a.per_class)
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    save_dataset(a.out, ds)
    print(f"samples={len(ds)}")
    for c, n in ds.class_counts().items():
        print(f"class_{c}={n}")
    _write_manifest(a.manifest or f"{a.out}.manifest.json", "gen-data", vars_of(a), [], [a.out])
    return 0


def cmd_train(a) -> int:
    ds = _load_data(a.data)
    cfg = TrainConfig(
        arch=a.arch,
        gamma=a.gamma,
        margin=a.margin,
        margin2=a.margin2,
        contrastive_margin=a.contrastive_margin,
        mask_alpha=a.mask_alpha,
        mask_beta=a.mask_beta,
        mask_normalize=a.mask_normalize,
        detach_w=a.detach_w,
        lr=a.lr,
        optimizer=a.optimizer,
        beta1=a.beta1,
        beta2=a.beta2,
        eps=a.eps,
        epochs=a.epochs,
        batch_size=a.batch_size,
        seed=a.seed,
        attention_layer_index=a.attention_layer_index,
        channels=a.channels,
        embedding_dim=a.embedding_dim,
        val_per_class=a.val_per_class,
    )
    enc = Encoder.init(cfg.encoder_config(ds.images.shape[1:]), seed=cfg.seed)
    log_path = a.log or f"{a.out}.log.jsonl"
    records = fit(enc, ds, cfg, checkpoint_dir=a.checkpoint_dir, log_path=log_path)
    save_checkpoint(a.out, enc.params)
    side = _sidecar(a.out)
    side.write_text(json.dumps({"encoder": enc.config.to_dict(), "train": cfg.to_dict()}, indent=1, sort_keys=True))
    outputs = [a.out, side, log_path]
    if a.checkpoint_dir:
        outputs += sorted(Path(a.checkpoint_dir).glob("epoch_*.sattn"))
    if records:
        print(f"final_recall_at_1={records[-1]['recall_at_1']:.6f}")
    print(f"epochs={len(records)}")
    _write_manifest(
        a.manifest or f"{a.out}.manifest.json",
        "train",
        vars_of(a),
        [a.data],
        outputs,
        {"config": cfg.to_dict(), "checkpoints": [str(p) for p in outputs if str(p).endswith(".sattn")]},
    )
    return 0


def _eval_split(ds, cfg: TrainConfig, split: str):
    if split == "all":
        return ds
    return split_stratified(ds, cfg.val_per_class, cfg.seed)[1]


def cmd_eval(a) -> int:
    enc, cfg = load_model(a.checkpoint)
    ds = _eval_split(_load_data(a.data), cfg, a.split)
    emb = embed(enc, ds.images)
    index = RetrievalIndex(emb, ds.labels)
    metrics = {f"recall_at_{k}": recall_at_k(index, None, None, k) for k in (1, 2, 4)}
    trip = sample_tuples(ds, "triplet", a.triplets, a.seed).indices
    metrics["attention_iou"] = float(np.mean(embed_attention_iou(enc, ds, trip, a.quantile)))
    metrics["queries"] = len(ds)
    text = format_metrics(metrics)
    sys.stdout.write(text)
    Path(a.out).write_text(text)
    _write_manifest(a.manifest or f"{a.out}.manifest.json", "eval", vars_of(a), [a.checkpoint, a.data], [a.out], {"metrics": metrics})
    return 0


def cmd_explain(a) -> int:
    enc, _ = load_model(a.checkpoint)
    ds = _load_data(a.data)
    idx = [int(v) for v in a.indices.split(",")]
    if len(idx) != EXPLAIN_ARITY[a.arch]:
        raise CLIError(f"{a.arch} needs {EXPLAIN_ARITY[a.arch]} indices, got {len(idx)}")
    for i in idx:
        if not 0 <= i < len(ds):
            raise CLIError(f"index {i} out of range (dataset has {len(ds)} samples)")
    arch = a.arch
    if arch == "siamese":
        arch = "siamese_same" if ds.labels[idx[0]] == ds.labels[idx[1]] else "siamese_diff"
    maps, w, scores, _ = tuple_attention(enc, [ds.images[i] for i in idx], arch)
    out_dir = Path(a.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    H, W = ds.images.shape[-2:]
    outputs = []
    for r, (i, M) in enumerate(zip(idx, maps)):
        p = out_dir / f"member{r}_sample{i}.pgm"
        write_pgm(p, map_to_pixels(upsampled_maps(M, H, W)))
        outputs.append(p)
    info = {"arch": arch, "indices": ",".join(map(str, idx))}
    info.update({f"score_{r}": s for r, s in enumerate(scores)})
    wd = w.data
    info.update(w_mean=float(wd.mean()), w_min=float(wd.min()), w_max=float(wd.max()), w_nonzero=int(np.count_nonzero(wd)))
    side = out_dir / "explain.txt"
    side.write_text(format_metrics(info))
    outputs.append(side)
    sys.stdout.write(format_metrics(info))
    _write_manifest(a.manifest or out_dir / "manifest.json", "explain", vars_of(a), [a.checkpoint, a.data], outputs)
    return 0


def cmd_segment(a) -> int:
    enc, cfg = load_model(a.checkpoint)
    ds = _eval_split(_load_data(a.data), cfg, a.split)
    pairs = segmentation_pairs(ds, a.pairs, a.seed)
    results = segment_pairs(enc, ds, pairs, a.quantile)
    metrics = {}
    for c in sorted({r.label for r in results}):
        metrics[f"iou_class_{c}"] = float(np.mean([r.iou for r in results if r.label == c]))
    metrics["mean_iou"] = float(np.mean([r.iou for r in results]))
    metrics["pairs"] = len(results)
    text = format_metrics(metrics)
    sys.stdout.write(text)
    Path(a.out).write_text(text)
    _write_manifest(a.manifest or f"{a.out}.manifest.json", "segment", vars_of(a), [a.checkpoint, a.data], [a.out], {"metrics": metrics})
    return 0


OUTPUT_FLAGS = {"out", "out_dir", "log", "checkpoint_dir", "manifest"}


def cmd_replay(a) -> int:
    """Re-run manifests in order with outputs redirected to ``--out-dir``.

    Inputs produced by an earlier manifest in the same replay are read from
    their replayed location. Exit status 0 iff every output is byte-identical.
    """
    out_dir = Path(a.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    moved: dict[str, str] = {}
    ok = True
    for n, mpath in enumerate(a.manifests):
        manifest = json.loads(Path(mpath).read_text())
        args = dict(manifest["args"])
        step_dir = out_dir / f"step{n}_{manifest['command']}"
        step_dir.mkdir(parents=True, exist_ok=True)
        remap: dict[str, str] = {}
        for key in OUTPUT_FLAGS:
            val = args.get(key)
            if val:
                new = str(step_dir / Path(val).name)
                remap[str(val)] = new
                args[key] = new
        for key in ("data", "checkpoint"):
            if args.get(key) in moved:
                args[key] = moved[args[key]]
        if manifest["command"] == "train" and not args.get("log"):
            args["log"] = str(step_dir / (Path(manifest["args"]["out"]).name + ".log.jsonl"))
            remap[f"{manifest['args']['out']}.log.jsonl"] = args["log"]
        if manifest["command"] == "train":
            remap[str(_sidecar(manifest["args"]["out"]))] = str(_sidecar(args["out"]))
        if not args.get("manifest"):
            args["manifest"] = str(step_dir / "manifest.json")
        ns = argparse.Namespace(**args)
        COMMANDS[manifest["command"]](ns)
        for old, digest in manifest["outputs"].items():
            new = _relocate(old, remap)
            moved[old] = new
            same = Path(new).exists() and sha256_file(new) == digest
            ok &= same
            print(f"{'identical' if same else 'DIFFERENT'} {old} -> {new}")
    return 0 if ok else 1


def _relocate(old: str, remap: dict[str, str]) -> str:
    if old in remap:
        return remap[old]
    for src, dst in remap.items():  # files inside a remapped output directory
        if old.startswith(src.rstrip("/") + "/"):
            return dst.rstrip("/") + old[len(src.rstrip("/")) :]
    return old


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "segment": cmd_segment,
    "replay": cmd_replay,
}


def vars_of(a) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(a).items() if k != "func"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simattn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic SDATA1 dataset")
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--per-class", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--channels", type=int, default=1)
    g.add_argument("--glyph-size", type=int, default=12)
    g.add_argument("--clutter", type=int, default=6)
    g.add_argument("--clutter-size", type=int, default=6)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--out", required=True)
    g.add_argument("--manifest")

    d = TrainConfig()
    t = sub.add_parser("train", help="train an encoder (writes SATTN1 checkpoint + log)")
    t.add_argument("--data", required=True)
    t.add_argument("--arch", choices=["siamese", "triplet", "quadruplet"], default=d.arch)
    t.add_argument("--gamma", type=float, default=d.gamma)
    t.add_argument("--margin", type=float, default=d.margin)
    t.add_argument("--margin2", type=float, default=d.margin2)
    t.add_argument("--contrastive-margin", type=float, default=d.contrastive_margin)
    t.add_argument("--mask-alpha", type=float, default=d.mask_alpha)
    t.add_argument("--mask-beta", type=float, default=d.mask_beta)
    t.add_argument("--mask-normalize", type=_bool, default=d.mask_normalize)
    t.add_argument("--detach-w", type=_bool, default=d.detach_w)
    t.add_argument("--lr", type=float, default=d.lr)
    t.add_argument("--optimizer", choices=["adam", "sgd"], default=d.optimizer)
    t.add_argument("--beta1", type=float, default=d.beta1)
    t.add_argument("--beta2", type=float, default=d.beta2)
    t.add_argument("--eps", type=float, default=d.eps)
    t.add_argument("--epochs", type=int, default=d.epochs)
    t.add_argument("--batch-size", type=int, default=d.batch_size)
    t.add_argument("--seed", type=int, default=d.seed)
    t.add_argument("--attention-layer-index", type=int, default=d.attention_layer_index)
    t.add_argument("--channels", type=_int_list, default=d.channels, help="comma-separated conv widths")
    t.add_argument("--embedding-dim", type=int, default=d.embedding_dim)
    t.add_argument("--val-per-class", type=int, default=d.val_per_class)
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.add_argument("--checkpoint-dir")
    t.add_argument("--manifest")

    for name, helptext in (("eval", "retrieval recall and attention IoU"), ("segment", "one-shot segmentation IoU")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--split", choices=["val", "all"], default="val")
        e.add_argument("--quantile", type=float, default=0.8)
        e.add_argument("--seed", type=int, default=3)
        e.add_argument("--out", required=True)
        e.add_argument("--manifest")
        if name == "eval":
            e.add_argument("--triplets", type=int, default=50)
        else:
            e.add_argument("--pairs", type=int, default=100)

    x = sub.add_parser("explain", help="export attention maps as PGM images")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--indices", required=True, help="comma-separated dataset indices, one per tuple member")
    x.add_argument("--arch", choices=sorted(EXPLAIN_ARITY), default="triplet")
    x.add_argument("--out-dir", required=True)
    x.add_argument("--manifest")

    r = sub.add_parser("replay", help="re-run manifests and verify byte-identical outputs")
    r.add_argument("manifests", nargs="+")
    r.add_argument("--out-dir", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, stream=sys.stderr, format="%(message)s")
    try:
        return COMMANDS[a.command](a)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
