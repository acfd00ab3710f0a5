import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import gradcheck
from transformeeg import layers as L
from transformeeg.model import (
    EncoderConfig,
    HeadConfig,
    ModelConfig,
    ModelConfigError,
    ShapeError,
    TokenizerConfig,
    build_model,
    count_params,
    encoder_forward,
    head_forward,
    layer_param_counts,
    load_checkpoint,
    loss_and_grads,
    model_forward,
    save_checkpoint,
    token_dims,
    tokenizer_forward,
)


def tiny(samples=64, **enc):
    enc = {"embed_dim": 16, "n_layers": 1, "ffn_hidden": 16, **enc}
    return ModelConfig(TokenizerConfig(in_channels=4), EncoderConfig(**enc), HeadConfig(), samples)


@pytest.fixture(scope="module")
def default_model():
    return build_model(ModelConfig())


# --- sizes -------------------------------------------------------------------

def test_token_dims():
    assert token_dims(2000, 2, 4) == 498
    assert (2000 - 4) // 2 + 1 == 999


def test_token_dims_matches_two_pools():
    for length in range(10, 4001):
        once = (length - 4) // 2 + 1
        assert token_dims(length, 2, 4) == (once - 4) // 2 + 1


@given(st.integers(8, 5000), st.integers(1, 4), st.integers(0, 4))
def test_token_dims_general(length, s, extra):
    k = s + extra
    once = (length - k) // s + 1
    if once >= k:
        assert token_dims(length, s, k) == (once - k) // s + 1


def test_default_parameter_count(default_model):
    assert count_params(default_model) == 210_561
    assert count_params(default_model, "tok.") == 3_072
    assert count_params(default_model, "enc.0.") == 99_584
    assert count_params(default_model, "head.") == 8_321


def test_per_layer_counts(default_model):
    counts = layer_param_counts(default_model)
    tok = [counts[f"tok.{b}.{n}"] for b in range(2) for n in ("conv1", "bn1", "conv2", "bn2")]
    assert tok == [384, 128, 384, 128, 768, 256, 768, 256]
    for i in range(2):
        assert [counts[f"enc.{i}.{n}"] for n in ("attn", "norm1", "linear1", "linear2", "norm2")] == \
            [66_048, 256, 16_512, 16_512, 256]
    assert counts["head.linear1"] == 8_256 and counts["head.linear2"] == 65


def test_running_stats_not_counted(default_model):
    assert all("running" not in k for k in default_model.weights)
    assert len(default_model.buffers) == 8


def test_hand_summed_tiny_count():
    p = build_model(tiny())
    c, d, k, e, h = 4, 2, 5, 16, 16
    tok = (c * d * k + c * d + 2 * c * d) * 2 + (c * d * d * k + c * d * d + 2 * c * d * d) * 2
    enc = (3 * e * e + 3 * e) + (e * e + e) + 2 * e + (h * e + h) + (e * h + e) + 2 * e
    head = (e * (e // 2) + e // 2) + (e // 2 + 1)
    assert count_params(p) == tok + enc + head


def test_config_validation():
    with pytest.raises(ModelConfigError):
        ModelConfig(TokenizerConfig(in_channels=4), EncoderConfig(embed_dim=8)).validate()
    with pytest.raises(ModelConfigError):
        ModelConfig(encoder=EncoderConfig(n_heads=3)).validate()
    with pytest.raises(ModelConfigError):
        ModelConfig(encoder=EncoderConfig(activation="tanh")).validate()
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()


# --- shapes ---------------------------------------------------------------------

def test_shape_chain(default_model):
    X = np.random.default_rng(0).standard_normal((64, 32, 2000))
    tokens = tokenizer_forward(default_model, X)
    assert tokens.shape == (64, 128, 498)
    enc = encoder_forward(default_model, tokens.transpose(0, 2, 1))
    assert enc.shape == (64, 498, 128)
    out = model_forward(default_model, X)
    assert out.shape == (64, 1)
    assert np.all((out > 0) & (out < 1))
    assert tokenizer_forward(default_model, X[:1]).shape == (1, 128, 498)


def test_class_token_extends_sequence():
    p = build_model(tiny(use_class_token=True))
    x = np.random.default_rng(1).standard_normal((2, 15, 16))
    assert encoder_forward(p, x).shape == (2, 16, 16)


def test_bad_input_shape():
    p = build_model(tiny())
    with pytest.raises(ShapeError):
        model_forward(p, np.zeros((2, 5, 64)))


# --- structural properties ------------------------------------------------------------

def test_channel_lineage(default_model):
    X = np.random.default_rng(2).standard_normal((2, 32, 2000))
    base = tokenizer_forward(default_model, X)
    for c in range(32):
        Xc = X.copy()
        Xc[:, c] = 0
        diff = np.any(tokenizer_forward(default_model, Xc) != base, axis=(0, 2))
        assert set(np.flatnonzero(diff)) == set(range(4 * c, 4 * c + 4))


def test_encoder_permutation_equivariance():
    p = build_model(tiny())
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 15, 16))
    perm = rng.permutation(15)
    np.testing.assert_allclose(encoder_forward(p, x[:, perm]), encoder_forward(p, x)[:, perm], atol=1e-12)


def test_full_model_token_order_invariance():
    p = build_model(tiny())
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 15, 16))
    perm = rng.permutation(15)
    np.testing.assert_allclose(head_forward(p, encoder_forward(p, x[:, perm])),
                               head_forward(p, encoder_forward(p, x)), atol=1e-12)


def test_positional_embedding_breaks_invariance():
    p = build_model(tiny(use_positional_embedding=True))
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 14, 16))
    perm = np.roll(np.arange(14), 1)
    assert not np.allclose(encoder_forward(p, x[:, perm]), encoder_forward(p, x)[:, perm])


def test_zero_head_gives_one_half():
    p = build_model(tiny())
    for k in ("head.linear1.weight", "head.linear1.bias", "head.linear2.weight", "head.linear2.bias"):
        p.weights[k][:] = 0
    out = model_forward(p, np.random.default_rng(6).standard_normal((5, 4, 64)))
    assert np.all(out == 0.5)


def test_forward_determinism():
    p = build_model(tiny())
    X = np.random.default_rng(7).standard_normal((4, 4, 64))
    assert model_forward(p, X).tobytes() == model_forward(p, X).tobytes()
    a = model_forward(p, X, training=True, rng=np.random.default_rng(1))
    b = model_forward(p, X, training=True, rng=np.random.default_rng(1))
    assert a.tobytes() == b.tobytes()


def test_build_model_deterministic_per_seed():
    a, b, c = build_model(tiny(), 1), build_model(tiny(), 1), build_model(tiny(), 2)
    assert all(a.weights[k].tobytes() == b.weights[k].tobytes() for k in a.weights)
    assert any(a.weights[k].tobytes() != c.weights[k].tobytes() for k in a.weights)


def test_init_bounds():
    p = build_model(ModelConfig())
    assert np.all(np.abs(p.weights["tok.0.conv1.weight"]) <= 1 / np.sqrt(5))
    assert np.all(np.abs(p.weights["enc.0.linear1.weight"]) <= 1 / np.sqrt(128))
    assert np.all(p.weights["enc.0.norm1.weight"] == 1) and np.all(p.weights["tok.1.bn2.bias"] == 0)


# --- gradients ------------------------------------------------------------------------

def test_gradcheck_variants():
    for enc in ({"use_class_token": True, "use_positional_embedding": True, "activation": "gelu"},
                {"activation": "elu", "n_heads": 2, "n_layers": 2, "ffn_hidden": 8}):
        assert gradcheck(tiny(32, **enc), 11) <= 1e-4


def test_absent_positional_embedding_has_no_gradient():
    p = build_model(tiny())
    X = np.random.default_rng(8).standard_normal((2, 4, 64))
    grads = loss_and_grads(p, X, [0, 1])[1]
    assert "enc.pos_embedding" not in grads and "enc.cls_token" not in grads


def test_final_bias_gradient_closed_form():
    p = build_model(tiny())
    p.weights["head.linear2.weight"][:] = 0
    p.weights["head.linear2.bias"][:] = 0
    y = np.array([1, 1, 0, 1], dtype=float)
    X = np.random.default_rng(9).standard_normal((4, 4, 64))
    g = loss_and_grads(p, X, y)[1]
    assert g["head.linear2.bias"][0] == pytest.approx(np.mean(0.5 - y), abs=1e-15)


def test_dropout_mask_statistics():
    rng = np.random.default_rng(10)
    m = L.dropout_mask((200, 300, 1), 0.2, rng)
    assert set(np.unique(m)) == {0.0, 1.25}
    assert abs(np.mean(m == 0) - 0.2) < 0.01
    assert L.dropout_mask((3, 3), 0.2, None) is None


# --- checkpoint ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    p = build_model(tiny(use_class_token=True))
    p.buffers["tok.0.bn1.running_mean"][:] = 0.3
    save_checkpoint(p, tmp_path / "m.ckpt", extra={"note": 1})
    q, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert extra == {"note": 1} and q.config == p.config
    assert all(q.weights[k].tobytes() == p.weights[k].tobytes() for k in p.weights)
    assert all(q.buffers[k].tobytes() == p.buffers[k].tobytes() for k in p.buffers)
    X = np.random.default_rng(11).standard_normal((3, 4, 64))
    assert model_forward(q, X).tobytes() == model_forward(p, X).tobytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")
