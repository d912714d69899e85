"""Acceptance gate: eight criteria, each printing one PASS/FAIL line.

Criteria 4-6 train the full ablation grid (18 runs of 40 epochs) unless
``results/ablation`` already holds models for the current training code.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from simattn import autograd as ag
from simattn.attention import attention_map, sample_scores, weights
from simattn.autograd import Tensor
from simattn.cli import main as cli_main, sha256_file
from simattn.data import sample_tuples, split_stratified
from simattn.evaluate import random_map_baseline, segment_pairs, segmentation_pairs
from simattn.experiments import ablation_config, ablation_run, default_dataset, eval_triplets
from simattn.model import Encoder, encode
from simattn.train import forward_tuples, step_gradients

import test_properties as props
from oracles import attention_loop, directional_op_check
from op_cases import (
    OP_CASES,
    attention_objective,
    directional_check,
    embedding_objective,
    random_dataset,
    small_encoder,
    tiny_config,
    tiny_encoder,
)

RESULTS = Path(__file__).resolve().parents[1] / "results" / "ablation"
ARCHS = ("triplet", "quadruplet", "siamese")
GAMMAS = (0.0, 0.2)
SEEDS = (0, 1, 2)


@pytest.fixture
def report(capsys):
    def emit(n: int, title: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {title}: {detail}")
        assert ok, detail

    return emit


@pytest.fixture(autouse=True)
def fresh_graph():
    ag.reset_graph()
    yield
    ag.reset_graph()


@pytest.fixture(scope="module")
def ablation():
    runs = {}
    for arch in ARCHS:
        for gamma in GAMMAS:
            for seed in SEEDS:
                runs[arch, gamma, seed] = ablation_run(arch, gamma, seed, cache_dir=RESULTS)
    return runs


def _seed_mean(runs, arch, gamma, key):
    return float(np.mean([runs[arch, gamma, s][key] for s in SEEDS]))


# -- 1 ----------------------------------------------------------------------


def _nonzero_attention_objective(enc, rng):
    """Second-order objective whose map is not identically zero (else the check is vacuous)."""
    for _ in range(20):
        x = rng.random((1, 16, 16))
        w = rng.standard_normal(5)  # a cotangent, so either sign is fair
        ag.reset_graph()
        f, A = encode(enc, Tensor._wrap(x))
        M = attention_map(ag.dot(Tensor._wrap(w), f), A).M.data
        if np.any(M > 0):
            return attention_objective(x, w, rng.standard_normal(M.shape))
    raise AssertionError("no instance with a nonzero map")


def test_c1_gradient_oracle_suite(report):
    t0 = time.perf_counter()
    worst1 = worst2 = 0.0
    checks = 0
    for seed in range(100):
        for case in OP_CASES:
            rng = np.random.default_rng(seed)
            e1, e2 = directional_op_check(case.fn, case.make(rng), rng, case.second_order)
            worst1, worst2 = max(worst1, e1), max(worst2, e2)
            checks += 1
        rng = np.random.default_rng(10_000 + seed)
        enc = small_encoder(seed, attention_layer_index=seed % 2)
        worst1 = max(worst1, directional_check(enc, embedding_objective(rng.random((1, 16, 16)), rng.standard_normal(5)), rng))
        worst2 = max(worst2, directional_check(enc, _nonzero_attention_objective(enc, rng), rng))
        checks += 2
    elapsed = time.perf_counter() - t0
    ok = worst1 < 1e-4 and worst2 < 1e-3 and elapsed < 60
    detail = (
        f"{len(OP_CASES)} ops + encoder x 100 seeds ({checks} checks), "
        f"worst first-order {worst1:.2e} (<1e-4), second-order {worst2:.2e} (<1e-3), {elapsed:.1f}s (<60s)"
    )
    report(1, "gradient oracles", ok, detail)


# -- 2 ----------------------------------------------------------------------


def test_c2_attention_equals_loop_oracle(report):
    worst = 0.0
    nonzero = 0
    for i in range(50):
        rng = np.random.default_rng(i)
        ag.reset_graph()
        if i % 2 == 0:  # scores from an encoder tuple
            enc = small_encoder(i, attention_layer_index=(i // 2) % 2)
            outs = [encode(enc, Tensor._wrap(rng.random((1, 16, 16)))) for _ in range(3)]
            fs = [f for f, _ in outs]
            s = sample_scores(weights("triplet", fs), fs)[0]
            A = outs[0][1]
        else:  # an arbitrary smooth scalar of a random feature map
            c, m, n = rng.integers(1, 6, 3)
            A = Tensor(rng.standard_normal((c, m, n)), requires_grad=True)
            R = Tensor._wrap(rng.standard_normal((c, m, n)))
            s = ag.sum(ag.mul(R, ag.sigmoid(ag.mul(A, A))))
        M = attention_map(s, A).M.data
        (dA,) = ag.grad(s, [A])
        worst = max(worst, float(np.max(np.abs(M - attention_loop(dA.data, A.data)))))
        nonzero += bool(np.any(M > 0))
    report(2, "attention map vs loop oracle", worst <= 1e-10, f"50 instances ({nonzero} with nonzero maps), max abs diff {worst:.2e} (<=1e-10)")


# -- 3 ----------------------------------------------------------------------


def test_c3_total_gradient_additivity(report):
    worst = 0.0
    for i in range(10):
        rng = np.random.default_rng(i)
        arch = ("triplet", "quadruplet", "siamese")[i % 3]
        cfg = tiny_config(arch, gamma=float(rng.uniform(0.05, 1.0)), detach_w=bool(i % 2))
        ds = random_dataset(i, k=4)
        enc = tiny_encoder(cfg, ds, i)
        batch = sample_tuples(ds, arch, 3, i)
        _, _, total = step_gradients(enc, ds, batch, cfg)
        parts = {}
        for part in ("ml", "sm"):
            ag.reset_graph()
            fw = forward_tuples(enc, ds, batch, cfg)
            loss = fw.loss_ml if part == "ml" else fw.loss_sm
            names = list(enc.params)
            parts[part] = dict(zip(names, (g.data for g in ag.grad(loss, [enc.params[k] for k in names]))))
        for k in total:
            worst = max(worst, float(np.max(np.abs(total[k] - (parts["ml"][k] + cfg.gamma * parts["sm"][k])))))
    report(3, "total gradient additivity", worst <= 1e-9, f"10 states over 3 archs, max abs diff {worst:.2e} (<=1e-9)")


# -- 4 ----------------------------------------------------------------------


def test_c4_ablation_trend(report, ablation):
    rows = []
    ok = True
    for arch in ARCHS:
        base = _seed_mean(ablation, arch, 0.0, "recall_at_1")
        prop = _seed_mean(ablation, arch, 0.2, "recall_at_1")
        good = prop > base if arch == "triplet" else prop >= base - 0.005
        ok &= good
        rows.append(f"{arch} {100 * base:.2f}->{100 * prop:.2f}{'' if good else ' (!)'}")
    epochs_ok = all(len(r["log"]) == 40 for r in ablation.values())
    above_chance = sum(r["recall_at_1"] > 1 / 8 for r in ablation.values())
    detail = "; ".join(rows) + f"; 40 log records each: {epochs_ok}; runs above chance: {above_chance}/{len(ablation)}"
    report(4, "ablation trend (mean R@1 over 3 seeds, gamma 0 -> 0.2)", ok and epochs_ok, detail)


# -- 5 ----------------------------------------------------------------------


def test_c5_attention_localization(report, ablation):
    ds = default_dataset(0)
    masks = []
    for seed in SEEDS:  # each seed draws its own validation split
        _, val = split_stratified(ds, ablation_config("triplet", 0.2, seed).val_per_class, seed)
        masks.append(val.part_masks[eval_triplets(val).ravel()])
    base = random_map_baseline(np.concatenate(masks), 0.8, reps=100, seed=0)
    trained = _seed_mean(ablation, "triplet", 0.2, "attention_iou")
    baseline_arm = _seed_mean(ablation, "triplet", 0.0, "attention_iou")
    beats_random = trained >= base.mean + 3 * base.std
    ok = beats_random and trained >= baseline_arm
    detail = (
        f"triplet gamma=0.2 IoU {trained:.4f} vs random {base.mean:.4f} + 3*{base.std:.4f} = {base.mean + 3 * base.std:.4f}; "
        f"gamma=0 IoU {baseline_arm:.4f}"
    )
    report(5, "attention localization", ok, detail)


# -- 6 ----------------------------------------------------------------------


def test_c6_one_shot_segmentation(report, ablation):
    cfg = ablation_config("triplet", 0.2, 0)
    ds = default_dataset(0)
    _, val = split_stratified(ds, cfg.val_per_class, cfg.seed)
    pairs = segmentation_pairs(val, 100, seed=3)
    untrained = Encoder.init(cfg.encoder_config(ds.images.shape[1:]), seed=cfg.seed)
    trained = ablation["triplet", 0.2, 0]["encoder"]
    base = np.array([r.iou for r in segment_pairs(untrained, val, pairs)])
    ours = np.array([r.iou for r in segment_pairs(trained, val, pairs)])
    again = np.array([r.iou for r in segment_pairs(trained, val, pairs)])
    sigma = base.std(ddof=1) / np.sqrt(len(base))
    gain = ours.mean() - base.mean()
    deterministic = np.array_equal(ours, again)
    ok = gain >= 3 * sigma and deterministic
    detail = (
        f"100 pairs: trained {ours.mean():.4f} vs untrained {base.mean():.4f}, "
        f"gain {gain:.4f} vs 3 sigma {3 * sigma:.4f}; deterministic rerun: {deterministic}"
    )
    report(6, "one-shot segmentation", ok, detail)


# -- 7 ----------------------------------------------------------------------


def test_c7_replay_is_byte_identical(report, tmp_path, capsys):
    d, m = tmp_path / "d.bin", tmp_path / "m.sattn"
    steps = [
        ["gen-data", "--classes", "3", "--per-class", "6", "--image-size", "32", "--glyph-size", "8", "--seed", "4", "--out", d],
        ["train", "--data", d, "--arch", "triplet", "--channels", "4,6,8", "--embedding-dim", "6", "--epochs", "2",
         "--batch-size", "4", "--val-per-class", "2", "--checkpoint-dir", tmp_path / "ck", "--out", m],
        ["eval", "--checkpoint", m, "--data", d, "--triplets", "4", "--out", tmp_path / "eval.txt"],
        ["explain", "--checkpoint", m, "--data", d, "--indices", "0,1,6", "--out-dir", tmp_path / "x"],
    ]
    for argv in steps:
        assert cli_main([str(a) for a in argv]) == 0
    manifests = [f"{m}.manifest.json", tmp_path / "eval.txt.manifest.json", tmp_path / "x" / "manifest.json"]
    code = cli_main(["replay", *map(str, manifests), "--out-dir", str(tmp_path / "replay")])
    out = capsys.readouterr().out
    verdicts = [line for line in out.splitlines() if line.startswith(("identical ", "DIFFERENT "))]
    kinds = {Path(line.split(" ")[1]).suffix for line in verdicts}
    same = sum(line.startswith("identical") for line in verdicts)
    ok = code == 0 and same == len(verdicts) and {".sattn", ".txt", ".pgm"} <= kinds
    ck = sha256_file(m) == sha256_file(tmp_path / "replay" / "step0_train" / "m.sattn")
    report(7, "train -> eval -> explain replay", ok and ck, f"{same}/{len(verdicts)} outputs byte-identical ({', '.join(sorted(kinds))})")


# -- 8 ----------------------------------------------------------------------


PROPERTIES = [
    props.test_attention_formula_is_non_negative,
    props.test_encoder_attention_is_non_negative,
    props.test_weights_lie_in_unit_cube,
    props.test_recall_monotone_in_k,
    props.test_attention_iou_scale_invariant,
]


def test_c8_invariant_suite(report):
    failures = []
    for prop in PROPERTIES:
        props.CALLS[prop.__name__] = 0
        try:
            prop()
        except Exception as exc:  # report every property before failing
            failures.append(f"{prop.__name__}: {type(exc).__name__}")
    counts = {p.__name__: props.CALLS[p.__name__] for p in PROPERTIES}
    enough = all(n >= 1000 for n in counts.values())
    detail = ", ".join(f"{k.removeprefix('test_')}={v}" for k, v in counts.items())
    if failures:
        detail += "; failed: " + "; ".join(failures)
    report(8, "invariant properties (>=1000 cases each)", enough and not failures, detail)
