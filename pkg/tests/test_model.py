import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from simattn import autograd as ag
from simattn.autograd import Tensor
from simattn.model import (
    ConvLayer,
    Encoder,
    EncoderConfig,
    MetricLossConfig,
    encode,
    load_checkpoint,
    metric_loss,
    save_checkpoint,
)

from oracles import leaf
from op_cases import directional_check, embedding_objective, small_encoder


@pytest.fixture(autouse=True)
def fresh_graph():
    ag.reset_graph()
    yield
    ag.reset_graph()


def test_default_encoder_shapes():
    enc = Encoder.init(EncoderConfig(), seed=0)
    x = np.random.default_rng(0).random((1, 64, 64))
    f, A = encode(enc, Tensor._wrap(x))
    assert f.shape == (32,) and A.shape == (32, 8, 8)
    fb, Ab = encode(enc, Tensor._wrap(np.stack([x, x])))
    assert fb.shape == (2, 32) and Ab.shape == (2, 32, 8, 8)
    assert np.allclose(fb.data[0], f.data, rtol=0, atol=1e-13)
    assert enc.parameter_count() == sum(p.size for p in enc.params.values()) > 0


def test_single_input_feature_map_feeds_embedding():
    enc = small_encoder(0)
    f, A = encode(enc, Tensor._wrap(np.random.default_rng(1).random((1, 16, 16))))
    (dA,) = ag.grad(f, [A], grad_outputs=Tensor._wrap(np.ones(f.shape)))
    assert np.any(dA.data != 0)


def test_encode_is_deterministic():
    enc = small_encoder(2)
    x = Tensor._wrap(np.random.default_rng(3).random((1, 16, 16)))
    f1, A1 = encode(enc, x)
    f2, A2 = encode(enc, x)
    assert np.array_equal(f1.data, f2.data) and np.array_equal(A1.data, A2.data)


def test_zero_weights_give_input_independent_embedding():
    enc = small_encoder(0)
    for k, p in enc.params.items():
        if k.endswith("weight"):
            p.data = np.zeros_like(p.data)
    rng = np.random.default_rng(0)
    f1, _ = encode(enc, Tensor._wrap(rng.random((1, 16, 16))))
    f2, _ = encode(enc, Tensor._wrap(rng.random((1, 16, 16))))
    assert np.array_equal(f1.data, f2.data)
    expected = 1.0 / (1.0 + np.exp(-enc.params["embed.bias"].data))
    assert np.allclose(f1.data, expected, atol=1e-15)


def test_encode_rejects_wrong_shape():
    enc = small_encoder(0)
    with pytest.raises(ValueError):
        encode(enc, Tensor._wrap(np.zeros((1, 15, 16))))


def test_config_validation():
    with pytest.raises(ValueError):
        layers = (ConvLayer(3), ConvLayer(4), ConvLayer(4))
        EncoderConfig(input_shape=(1, 16, 16), layers=layers, attention_layer_index=2).validate()
    with pytest.raises(ValueError):
        EncoderConfig(input_shape=(1, 16, 16), layers=(ConvLayer(3, kernel=21, pad=0),)).validate()
    cfg = EncoderConfig()
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.layer_shapes() == [(8, 32, 32), (16, 16, 16), (32, 8, 8)]


@pytest.mark.parametrize("seed", range(3))
def test_embedding_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    enc = small_encoder(seed)
    obj = embedding_objective(rng.random((1, 16, 16)), rng.standard_normal(5))
    assert directional_check(enc, obj, rng) < 1e-4


def test_embedding_gradient_per_weight_entry():
    rng = np.random.default_rng(7)
    enc = small_encoder(7)
    x = rng.random((1, 16, 16))
    w = enc.params["conv0.weight"]
    f, _ = encode(enc, Tensor._wrap(x))
    (g,) = ag.grad(ag.take(ag.reshape(f, (5, 1)), [2]), [w], grad_outputs=Tensor._wrap(np.ones((1, 1))))
    base = w.data.copy()
    for idx in [(0, 0, 0, 0), (1, 0, 2, 1), (2, 0, 1, 1)]:
        vals = []
        for sgn in (1, -1):
            d = base.copy()
            d[idx] += sgn * 1e-5
            w.data = d
            ag.reset_graph()
            vals.append(encode(enc, Tensor._wrap(x))[0].data[2])
        w.data = base
        fd = (vals[0] - vals[1]) / 2e-5
        assert abs(fd - g.data[idx]) <= 1e-4 * max(abs(fd), 1e-8)


# -- metric losses ----------------------------------------------------------


def _line(*xs):
    return [leaf([x, 0.0]) for x in xs]


def test_triplet_loss_examples():
    cfg = MetricLossConfig("triplet", margin=0.3)
    assert metric_loss(cfg, _line(0.0, 0.2, 1.0)).item() == 0.0
    assert abs(metric_loss(cfg, _line(0.0, 0.5, -0.5)).item() - 0.3) < 1e-9


def test_contrastive_loss_examples():
    cfg = MetricLossConfig("contrastive", contrastive_margin=1.0)
    assert abs(metric_loss(cfg, _line(0.0, 0.4), same=True).item() - 0.16) < 1e-9
    assert abs(metric_loss(cfg, _line(0.0, 0.4), same=False).item() - 0.36) < 1e-9
    assert metric_loss(cfg, _line(0.0, 1.5), same=False).item() == 0.0
    with pytest.raises(ValueError):
        metric_loss(cfg, _line(0.0, 0.4))


def test_quadruplet_loss_adds_pair_term():
    cfg = MetricLossConfig("quadruplet", margin=0.3, margin2=0.2)
    # d(a,p)=0.5, d(a,n1)=0.6 -> 0.2 ; d(n1,n2)=0.4 -> 0.3
    fs = _line(0.0, 0.5, -0.6, -1.0)
    assert abs(metric_loss(cfg, fs).item() - 0.5) < 1e-9


def test_metric_loss_errors():
    with pytest.raises(ValueError):
        metric_loss(MetricLossConfig("triplet"), _line(0.0, 1.0))
    with pytest.raises(ValueError):
        MetricLossConfig("triplet", margin=-0.1)
    with pytest.raises(ValueError):
        MetricLossConfig("hinge")


def test_metric_loss_batches_by_mean():
    cfg = MetricLossConfig("triplet", margin=0.3)
    a = leaf([[0.0, 0.0], [0.0, 0.0]])
    p = leaf([[0.2, 0.0], [0.5, 0.0]])
    n = leaf([[1.0, 0.0], [-0.5, 0.0]])
    assert abs(metric_loss(cfg, (a, p, n)).item() - 0.15) < 1e-9


emb = hnp.arrays(np.float64, (3, 6), elements=st.floats(0, 1))


@settings(max_examples=200, deadline=None)
@given(fs=emb, margin=st.floats(0, 1))
def test_triplet_zero_iff_criterion_met(fs, margin):
    ag.reset_graph()
    loss = metric_loss(MetricLossConfig("triplet", margin=margin), [leaf(f) for f in fs]).item()
    d_ap = np.sqrt(np.sum((fs[0] - fs[1]) ** 2) + 1e-12)
    d_an = np.sqrt(np.sum((fs[0] - fs[2]) ** 2) + 1e-12)
    if d_an >= d_ap + margin + 1e-9:
        assert loss == 0.0
    if d_an < d_ap + margin - 1e-9:
        assert loss > 0.0


@settings(max_examples=200, deadline=None)
@given(fs=hnp.arrays(np.float64, (4, 6), elements=st.floats(0, 1)), perm=st.permutations(range(6)))
def test_metric_loss_permutation_invariant(fs, perm):
    for kind in ("triplet", "quadruplet", "contrastive"):
        cfg = MetricLossConfig(kind)
        n = {"contrastive": 2, "triplet": 3, "quadruplet": 4}[kind]
        same = True if kind == "contrastive" else None
        ag.reset_graph()
        a = metric_loss(cfg, [leaf(f) for f in fs[:n]], same=same).item()
        b = metric_loss(cfg, [leaf(f[list(perm)]) for f in fs[:n]], same=same).item()
        assert abs(a - b) <= 1e-12


# -- checkpoints ------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    enc = Encoder.init(EncoderConfig(), seed=4)
    path = tmp_path / "m.sattn"
    save_checkpoint(path, enc.params)
    state = load_checkpoint(path)
    assert list(state) == list(enc.params)
    for k, v in state.items():
        assert v.dtype == np.float64 and np.array_equal(v, enc.params[k].data)
    save_checkpoint(tmp_path / "again.sattn", state)
    assert (tmp_path / "again.sattn").read_bytes() == path.read_bytes()
    assert path.read_bytes()[:6] == b"SATTN1"


def test_checkpoint_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.sattn"
    bad.write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        load_checkpoint(bad)
    enc = small_encoder(0)
    good = tmp_path / "good.sattn"
    save_checkpoint(good, enc.params)
    bad.write_bytes(good.read_bytes()[:-3])
    with pytest.raises(ValueError):
        load_checkpoint(bad)


def test_load_state_checks_names_and_shapes():
    enc = small_encoder(0)
    state = enc.state()
    state.pop("embed.bias")
    with pytest.raises(ValueError):
        enc.load_state(state)
    state = enc.state()
    state["embed.bias"] = np.zeros(7)
    with pytest.raises(ValueError):
        enc.load_state(state)
