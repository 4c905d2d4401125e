import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixsing.errors import CapabilityError, ConfigError, DimensionError, FormatError, VocabError
from mixsing.model import (
    ModelConfig,
    backward,
    channel_mix,
    embed_inputs,
    forward,
    forward_with_cache,
    init_params,
    load_checkpoint,
    param_count,
    param_shapes,
    save_checkpoint,
    token_feedforward,
    token_mix,
)
from mixsing.numerics import gelu, gradient_check, l1_loss, l1_loss_backward, layernorm

TINY = ModelConfig(n_blocks=2, seq_len=8, d_phoneme=8, d_pitch=4, d_mel=6, hidden_channel=16, hidden_token=8, dropout=0.3)


def random_ids(cfg, rng, batch=None):
    shape = (cfg.seq_len,) if batch is None else (batch, cfg.seq_len)
    return rng.integers(0, cfg.pitch_vocab, shape), rng.integers(0, cfg.phoneme_vocab, shape)


def zero_tensors(params, keyword):
    for name in params.names():
        if keyword in name:
            params[name][...] = 0


def model_grad_check(cfg, train, seed=0):
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    # non-trivial norms and biases so every gradient path is exercised; unit-scale
    # embeddings keep layernorm inputs well away from the eps regime, where a
    # 1e-3 step would be a large fraction of the signal
    for p in params:
        scale = 1.0 if p.name.startswith("embed") else 0.1
        p.value += rng.normal(0, scale, p.value.shape).astype(p.value.dtype)
    pitch, phon = random_ids(cfg, rng, batch=2)
    target = rng.standard_normal((2, cfg.seq_len, cfg.d_mel))
    mask = np.ones((2, cfg.seq_len), bool)
    mask[1, -3:] = False

    def f():
        params.zero_grad()
        y, cache = forward_with_cache(pitch, phon, params, train=train, seed=3, step=5)
        backward(l1_loss_backward(y, target.astype(y.dtype), mask), cache, params)
        return l1_loss(y, target, mask)

    return gradient_check(f, list(params), h=1e-3, samples=4)


# ---------------------------------------------------------------- shapes and counts


def test_default_param_count():
    cfg = ModelConfig()
    assert cfg.d_model == 288
    n = param_count(cfg)
    assert n == 8_535_992
    assert 6.8e6 <= n <= 9.2e6
    assert n == sum(a * b for a, b in param_shapes(cfg).values())


def test_ablation_param_count():
    cfg = ModelConfig.ablation()
    n = param_count(cfg)
    assert 7.2e6 <= n <= 8.8e6
    assert n == sum(a * b for a, b in param_shapes(cfg).values())
    assert not any("token" in k or "ln2" in k for k in param_shapes(cfg))


def test_zero_blocks_count():
    cfg = ModelConfig(n_blocks=0)
    D = cfg.d_model
    assert param_count(cfg) == 69 * 256 + 25 * 32 + D * D + D + D * 120 + 120


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 4), st.integers(1, 30), st.integers(1, 20), st.integers(1, 10),
    st.integers(1, 40), st.integers(1, 40), st.booleans(),
)
def test_param_count_closed_form(n, L, dc, dp, hc, ht, ablate):
    cfg = ModelConfig(n_blocks=n, seq_len=L, d_phoneme=dc, d_pitch=dp, hidden_channel=hc, hidden_token=ht, ablate_token_mixer=ablate)
    assert param_count(cfg) == init_params(cfg, 0).size()


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(seq_len=0)
    with pytest.raises(ConfigError):
        ModelConfig(dropout=1.0)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})
    cfg = ModelConfig(n_blocks=3)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- init


def test_init_deterministic_and_norms():
    a, b = init_params(TINY, 5), init_params(TINY, 5)
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.value, pb.value)
    assert not np.array_equal(a["in_proj.w"], init_params(TINY, 6)["in_proj.w"])
    for name in a.names():
        if name.endswith("gamma"):
            assert np.all(a[name] == 1)
        if name.endswith(("beta", ".b", ".b1", ".b2")):
            assert np.all(a[name] == 0)


def test_init_weight_variance():
    cfg = ModelConfig(n_blocks=1, seq_len=200, d_phoneme=256, d_pitch=32, hidden_channel=768)
    p = init_params(cfg, 0)
    w = p["block.0.channel.w1"]
    sample = w.reshape(-1)[:10000]
    target = 1.0 / (3 * w.shape[0])  # Var of U(-1/sqrt(n), 1/sqrt(n))
    assert abs(sample.var() / target - 1) < 0.2
    emb = p["embed.phoneme"].reshape(-1)
    assert abs(emb.std() / 0.02 - 1) < 0.2


# ---------------------------------------------------------------- embedding


def test_embed_shape_default():
    cfg = ModelConfig(n_blocks=0)
    p = init_params(cfg, 0)
    pitch, phon = random_ids(cfg, np.random.default_rng(0))
    assert embed_inputs(pitch, phon, p).shape == (200, 288)


def test_embed_identical_rows():
    p = init_params(TINY, 0)
    out = embed_inputs(np.full(8, 3), np.full(8, 7), p)
    assert np.all(out == out[0])


def test_embed_zero_tables():
    p = init_params(TINY, 0)
    p["embed.phoneme"][...] = 0
    p["embed.pitch"][...] = 0
    out = embed_inputs(*random_ids(TINY, np.random.default_rng(1)), p)
    assert np.all(out == 0)


def test_embed_vocab_and_length_errors():
    p = init_params(TINY, 0)
    with pytest.raises(VocabError):
        embed_inputs(np.full(8, 25), np.zeros(8, int), p)
    with pytest.raises(VocabError):
        embed_inputs(np.zeros(8, int), np.full(8, -1), p)
    with pytest.raises(DimensionError):
        embed_inputs(np.zeros(7, int), np.zeros(7, int), p)


# ---------------------------------------------------------------- mixers


def test_channel_mix_zero_weights_is_identity(rng):
    p = init_params(TINY, 0)
    zero_tensors(p, "channel.w")
    x = rng.standard_normal((8, 12)).astype(np.float32)
    assert np.array_equal(channel_mix(x, p, 0), x)


def test_token_mix_zero_weights_is_identity(rng):
    p = init_params(TINY, 0)
    zero_tensors(p, "token.w")
    x = rng.standard_normal((8, 12)).astype(np.float32)
    assert np.array_equal(token_mix(x, p, 0), x)


def test_channel_mix_composition_oracle(rng):
    p = init_params(TINY, 1)
    x = rng.standard_normal((8, 12)).astype(np.float32)
    h = layernorm(x, p["block.0.ln1.gamma"].ravel(), p["block.0.ln1.beta"].ravel())
    hid = gelu(h @ p["block.0.channel.w1"] + p["block.0.channel.b1"])
    ref = x + hid @ p["block.0.channel.w2"] + p["block.0.channel.b2"]
    out = channel_mix(x, p, 0)
    assert out.shape == x.shape
    assert np.allclose(out, ref, atol=1e-6, rtol=0)


def test_token_mix_composition_oracle(rng):
    p = init_params(TINY, 1)
    x = rng.standard_normal((8, 12)).astype(np.float32)
    h = layernorm(x, p["block.1.ln2.gamma"].ravel(), p["block.1.ln2.beta"].ravel())
    hid = gelu(h.T @ p["block.1.token.w1"] + p["block.1.token.b1"])
    ref = x + (hid @ p["block.1.token.w2"] + p["block.1.token.b2"]).T
    assert np.allclose(token_mix(x, p, 1), ref, atol=1e-6, rtol=0)


def test_token_mix_channel_permutation(rng):
    p = init_params(TINY, 2)
    for n in ("block.0.ln2.gamma", "block.0.ln2.beta"):
        p[n][...] = 1.0 if n.endswith("gamma") else 0.0  # channel-uniform affine
    x = rng.standard_normal((8, 12)).astype(np.float32)
    perm = rng.permutation(12)
    branch = token_mix(x, p, 0) - x
    branch_p = token_mix(x[:, perm], p, 0) - x[:, perm]
    assert np.allclose(branch[:, perm], branch_p, atol=1e-6)


def test_token_mix_row_count(rng):
    p = init_params(TINY, 0)
    with pytest.raises(DimensionError):
        token_mix(rng.standard_normal((7, 12)).astype(np.float32), p, 0)
    ab = init_params(ModelConfig(**{**TINY.to_dict(), "ablate_token_mixer": True}), 0)
    with pytest.raises(CapabilityError):
        token_mix(rng.standard_normal((8, 12)).astype(np.float32), ab, 0)
    with pytest.raises(CapabilityError):
        token_feedforward(ab, 0, np.eye(8, dtype=np.float32))


# ---------------------------------------------------------------- forward


def test_forward_default_shape_and_determinism():
    cfg = ModelConfig(n_blocks=1)
    p = init_params(cfg, 0)
    pitch, phon = random_ids(cfg, np.random.default_rng(0))
    y = forward(pitch, phon, p)
    assert y.shape == (200, 120) and y.dtype == np.float32
    assert np.array_equal(y, forward(pitch, phon, p))


def test_forward_zero_token_weights_equals_ablation(rng):
    full = init_params(TINY, 4)
    zero_tensors(full, "token.w")
    zero_tensors(full, "token.b")
    ab_cfg = ModelConfig(**{**TINY.to_dict(), "ablate_token_mixer": True})
    ab = init_params(ab_cfg, 4)
    for name in ab.names():
        ab[name][...] = full[name]
    pitch, phon = random_ids(TINY, rng, batch=3)
    assert np.array_equal(forward(pitch, phon, full), forward(pitch, phon, ab))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 7))
def test_ablated_frame_locality(seed, t):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(**{**TINY.to_dict(), "ablate_token_mixer": True})
    p = init_params(cfg, seed % 100)
    pitch, phon = random_ids(cfg, rng)
    y = forward(pitch, phon, p)
    pitch2, phon2 = pitch.copy(), phon.copy()
    others = [i for i in range(8) if i != t]
    pitch2[others] = rng.integers(0, cfg.pitch_vocab, 7)
    phon2[others] = rng.integers(0, cfg.phoneme_vocab, 7)
    assert np.array_equal(forward(pitch2, phon2, p)[t], y[t])


def test_full_model_mixes_frames(rng):
    p = init_params(TINY, 0)
    pitch, phon = random_ids(TINY, rng)
    y = forward(pitch, phon, p)
    phon2 = phon.copy()
    phon2[7] = (phon[7] + 1) % TINY.phoneme_vocab
    assert not np.array_equal(forward(pitch, phon2, p)[0], y[0])


def test_batch_equals_per_segment_bitwise(rng):
    cfg = ModelConfig(n_blocks=2, seq_len=50, d_phoneme=24, d_pitch=8, hidden_channel=40, hidden_token=30)
    p = init_params(cfg, 0)
    pitch, phon = random_ids(cfg, rng, batch=5)
    batched = forward(pitch, phon, p)
    for i in range(5):
        assert np.array_equal(batched[i], forward(pitch[i], phon[i], p))


def test_train_mode_dropout_keyed_by_step(rng):
    p = init_params(TINY, 0)
    pitch, phon = random_ids(TINY, rng)
    a = forward(pitch, phon, p, train=True, seed=1, step=1)
    assert np.array_equal(a, forward(pitch, phon, p, train=True, seed=1, step=1))
    assert not np.array_equal(a, forward(pitch, phon, p, train=True, seed=1, step=2))
    assert not np.array_equal(a, forward(pitch, phon, p))


# ---------------------------------------------------------------- gradients


def test_gradient_check_tiny_eval():
    assert model_grad_check(ModelConfig(**{**TINY.to_dict(), "dropout": 0.0}), train=False) < 1e-3


def test_gradient_check_tiny_train_with_dropout():
    assert model_grad_check(TINY, train=True, seed=1) < 1e-3


def test_gradient_check_single_block():
    cfg = ModelConfig(n_blocks=1, seq_len=6, d_phoneme=5, d_pitch=3, d_mel=4, hidden_channel=7, hidden_token=5, dropout=0.0)
    assert model_grad_check(cfg, train=False, seed=2) < 1e-3


def test_gradient_check_ablated():
    cfg = ModelConfig(**{**TINY.to_dict(), "ablate_token_mixer": True, "n_blocks": 3})
    assert model_grad_check(cfg, train=True, seed=3) < 1e-3


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    p = init_params(TINY, 9)
    save_checkpoint(tmp_path / "m.ten1", p, meta={"base_note": 55})
    q, extra, doc = load_checkpoint(tmp_path / "m.ten1")
    assert q.config == TINY and extra == {} and doc["base_note"] == 55
    for a, b in zip(p, q):
        assert a.name == b.name and np.array_equal(a.value, b.value)


def test_checkpoint_validation(tmp_path):
    p = init_params(TINY, 9)
    path = tmp_path / "m.ten1"
    save_checkpoint(path, p)
    side = path.with_suffix(".json")
    doc = json.loads(side.read_text())
    doc["model"]["hidden_channel"] = 17
    side.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_checkpoint(path)
    doc["model"]["hidden_channel"] = 16
    doc["model"]["n_blocks"] = 3
    side.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_checkpoint(path)
    side.unlink()
    with pytest.raises(FormatError):
        load_checkpoint(path)
