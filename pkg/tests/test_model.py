import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smla import model as M
from smla import tensor as T
from smla.errors import ConfigError, DimensionError, NumericError
from smla.tensor import Tensor

TINY = dict(input_dim=16, channels=(4, 4, 8, 8, 16), blocks=(1, 1, 1, 1), num_speakers=3)


def tiny(ablation="mla-sap-fr-dln", **kw):
    return M.ModelConfig.from_ablation(ablation, **{**TINY, "reduction_ratio": 4, **kw})


@pytest.fixture
def rng():
    return np.random.default_rng(99)


# ---------------------------------------------------------------- configuration
def test_ablation_mapping_is_bijective():
    assert len(set(M.ABLATIONS.values())) == len(M.ABLATIONS) == 5
    for name in M.ABLATIONS:
        assert M.ModelConfig.from_ablation(name).ablation == name


@pytest.mark.parametrize("name,dim", [("gap", 256), ("sap", 256), ("mla-sap", 512),
                                      ("mla-sap-fr", 512), ("mla-sap-fr-dln", 512)])
def test_embedding_dims(name, dim):
    assert M.ModelConfig.from_ablation(name).embedding_dim == dim


def test_mla_gap_dim():
    assert M.ModelConfig(encoding_mode="mla-gap", use_fr=False, use_dln=False).embedding_dim == 512


@pytest.mark.parametrize("kw", [dict(encoding_mode="tap"), dict(channels=(1, 2, 3)), dict(num_speakers=1),
                                dict(reduction_ratio=7), dict(alpha=0.0), dict(dropout_rate=1.0),
                                dict(blocks=(0, 1, 1, 1))])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        M.ModelConfig(**kw)


def test_unknown_ablation():
    with pytest.raises(ConfigError, match="mla-sap-fr-dln"):
        M.ModelConfig.from_ablation("resnet")


# ---------------------------------------------------------------- parameters
def test_expected_shapes_match_build(rng):
    for name in M.ABLATIONS:
        cfg = tiny(name)
        params = M.build(cfg, rng)
        shapes = M.expected_shapes(cfg)
        assert {n: t.shape for n, t in params.items()} == {n: s for n, s in shapes.items()
                                                            if n in params}
        assert set(shapes) == set(params.tensors) | set(params.buffers)


def test_full_trunk_layout():
    specs = M._conv_specs(M.ModelConfig())
    assert sum(1 for s in specs if s[0].endswith("conv1") and s[0] != "conv1") == 16
    projections = [s[0] for s in specs if s[0].endswith("proj")]
    assert projections == ["stage2.block0.proj", "stage3.block0.proj", "stage4.block0.proj"]


def test_trunk_count_excludes_head():
    cfg = M.ModelConfig(encoding_mode="mla-gap", use_fr=False, use_dln=False)
    params = M.build(cfg, np.random.default_rng(0))
    head = params.count("classifier")
    assert M.trunk_parameter_count(cfg) == params.count() - head


def test_learn_alpha_adds_parameter(rng):
    params = M.build(tiny(learn_alpha=True), rng)
    assert params["dln.alpha"].item() == 10.0
    assert "dln.alpha" not in M.build(tiny(), rng)


# ---------------------------------------------------------------- forward
def test_tiny_forward_shapes(rng):
    cfg = tiny()
    params = M.build(cfg, rng)
    res = M.forward(params, cfg, rng.normal(size=(2, 16, 24)))
    assert [m.shape for m in res.stage_outputs] == [(2, 4, 16, 24), (2, 4, 16, 24), (2, 8, 8, 12),
                                                    (2, 8, 4, 6), (2, 16, 2, 3)]
    assert [t.shape for t in res.taps] == [(2, 4), (2, 4), (2, 8), (2, 8), (2, 16)]
    assert res.concat.shape == res.gate.shape == res.normalized.shape == (2, 40)
    assert res.logits.shape == (2, 3)
    assert [a.shape for a in res.attention] == [(2, 24), (2, 24), (2, 12), (2, 6), (2, 3)]


@pytest.mark.parametrize("name", list(M.ABLATIONS))
def test_every_ablation_runs(rng, name):
    cfg = tiny(name)
    res = M.forward(M.build(cfg, rng), cfg, rng.normal(size=(2, 16, 17)), training=True, rng=rng)
    assert res.embeddings.shape == (2, cfg.embedding_dim)
    assert (res.gate is None) != cfg.use_fr
    assert (res.normalized is None) != cfg.use_dln


def test_odd_lengths_floor(rng):
    cfg = tiny()
    res = M.forward(M.build(cfg, rng), cfg, rng.normal(size=(1, 16, 9)))
    assert res.stage_outputs[-1].shape[-2:] == (2, 2)


def test_bad_inputs(rng):
    cfg = tiny()
    params = M.build(cfg, rng)
    with pytest.raises(DimensionError):
        M.forward(params, cfg, np.zeros((1, 15, 24)))
    with pytest.raises(DimensionError):
        M.forward(params, cfg, np.zeros((1, 16, 5)))


def test_eval_deterministic_and_batch_independent(rng):
    cfg = tiny()
    params = M.build(cfg, rng)
    X = rng.normal(size=(3, 16, 20))
    a = M.forward(params, cfg, X).embeddings.data
    b = M.forward(params, cfg, X).embeddings.data
    c = M.forward(params, cfg, X[[2, 0, 1]]).embeddings.data
    assert a.tobytes() == b.tobytes()
    np.testing.assert_allclose(c, a[[2, 0, 1]], rtol=1e-5, atol=1e-5)


def test_training_updates_running_stats(rng):
    cfg = tiny()
    params = M.build(cfg, rng)
    before = params.buffers["conv1.bn.running_mean"].copy()
    M.forward(params, cfg, rng.normal(size=(2, 16, 20)) + 3.0, training=True, rng=rng)
    assert not np.allclose(before, params.buffers["conv1.bn.running_mean"])


def test_dropout_only_in_training(rng):
    cfg = tiny(dropout_rate=0.5)
    params = M.build(cfg, rng)
    X = rng.normal(size=(2, 16, 20))
    snap = {n: b.copy() for n, b in params.buffers.items()}
    a = M.forward(params, cfg, X, training=True, rng=np.random.default_rng(1)).logits.data
    params.buffers.update({n: b.copy() for n, b in snap.items()})
    b = M.forward(params, cfg, X, training=True, rng=np.random.default_rng(2)).logits.data
    assert not np.allclose(a, b)


# ---------------------------------------------------------------- pooling
def test_attention_weights_sum_to_one(rng):
    fmap = Tensor(rng.normal(size=(3, 5, 4, 7)))
    _, w = M.attention_pool(fmap, Tensor(rng.normal(size=(5, 5))), Tensor(np.zeros(5)),
                            Tensor(rng.normal(size=5)))
    np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(w.data > 0)


def test_zero_context_vector_gives_mean_pooling(rng):
    fmap = Tensor(rng.normal(size=(2, 3, 4, 6)), dtype=np.float64)
    W, b = Tensor(rng.normal(size=(3, 3)), dtype=np.float64), Tensor(rng.normal(size=3), dtype=np.float64)
    pooled, w = M.attention_pool(fmap, W, b, Tensor(np.zeros(3), dtype=np.float64))
    np.testing.assert_allclose(w.data, 1 / 6)
    h = np.tanh(fmap.data.mean(axis=2).transpose(0, 2, 1) @ W.data + b.data)
    np.testing.assert_allclose(pooled.data, h.mean(axis=1), rtol=1e-12)


def test_attention_concentrates_on_matching_frame():
    # frame 2 aligned with u gets nearly all the weight
    y = np.zeros((1, 2, 1, 5))
    y[0, :, 0, 2] = [3.0, 0.0]
    pooled, w = M.attention_pool(Tensor(y), Tensor(np.eye(2) * 5), Tensor(np.zeros(2)),
                                 Tensor([20.0, 0.0]))
    assert w.data[0].argmax() == 2 and w.data[0, 2] > 0.999


def test_gap_pool(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    np.testing.assert_allclose(M.gap_pool(Tensor(x)).data, x.mean(axis=(2, 3)), rtol=1e-5)


def test_aggregate_checks_lengths(rng):
    cfg = tiny()
    with pytest.raises(ConfigError):
        M.aggregate([Tensor(np.zeros((1, 4)))] * 5, cfg)


# ---------------------------------------------------------------- recalibration and normalisation
@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_recalibration_gate_properties(seed):
    rng = np.random.default_rng(seed)
    V = Tensor(rng.normal(size=(4, 16)))
    W1 = Tensor(rng.normal(0, 0.25, size=(16, 4)))
    W2 = Tensor(rng.normal(0, 0.5, size=(4, 16)))
    Vh, gate = M.feature_recalibrate(V, W1, W2, 4)
    assert np.all((gate.data > 0) & (gate.data < 1))
    np.testing.assert_allclose(Vh.data, V.data * gate.data, rtol=1e-6)


def test_recalibration_shape_errors(rng):
    V = Tensor(rng.normal(size=(2, 12)))
    with pytest.raises(ConfigError):
        M.feature_recalibrate(V, Tensor(np.zeros((12, 2))), Tensor(np.zeros((2, 12))), 5)
    with pytest.raises(DimensionError):
        M.feature_recalibrate(V, Tensor(np.zeros((12, 2))), Tensor(np.zeros((2, 12))), 4)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(0.5, 50.0))
def test_length_norm(seed, alpha):
    V = np.random.default_rng(seed).normal(size=(3, 8))
    out = M.deep_length_normalize(Tensor(V, dtype=np.float64), alpha).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), alpha, rtol=1e-12)


def test_length_norm_gradient_orthogonal_to_input(rng):
    with T.float64():
        V = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
    w = rng.normal(size=(2, 6))
    (M.deep_length_normalize(V, 10.0) * w).sum().backward()
    np.testing.assert_allclose((V.grad * V.data).sum(axis=1), 0.0, atol=1e-12)


def test_length_norm_zero_vector():
    with pytest.raises(NumericError):
        M.deep_length_normalize(Tensor(np.zeros((1, 4))), 10.0)


def test_params_astype_and_copy(rng):
    params = M.build(tiny(), rng)
    p64 = params.astype(np.float64)
    assert all(t.dtype == np.float64 for _, t in p64.items())
    c = params.copy()
    c["classifier.bias"].data += 1
    assert not np.allclose(c["classifier.bias"].data, params["classifier.bias"].data)
