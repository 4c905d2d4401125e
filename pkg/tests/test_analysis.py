import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import circulant

from mixsing.errors import CapabilityError, DegenerateInputError, DimensionError
from mixsing.analysis import (
    bandwidth_estimate,
    diagonal_constancy,
    edge_middle_ratio,
    export_heatmap,
    identity_probe,
    loss_profile,
    read_csv_matrix,
    read_pgm,
    to_pgm_pixels,
)
from mixsing.model import ModelConfig, forward, init_params
from mixsing.numerics import l1_loss
from mixsing.trainer import SegmentExample, stack

PROBE_CFG = ModelConfig(n_blocks=2, seq_len=200, d_phoneme=8, d_pitch=4, d_mel=6, hidden_channel=8, hidden_token=200)


def gelu_ref(x):
    from scipy.special import ndtr

    return x * ndtr(x)


# ---------------------------------------------------------------- diagonal constancy


def test_constancy_examples(rng):
    assert diagonal_constancy(np.eye(50)) == 1.0
    assert diagonal_constancy(np.full((7, 7), 3.5)) == 1.0
    assert diagonal_constancy(np.zeros((4, 4))) == 1.0
    assert diagonal_constancy(circulant(rng.standard_normal(30))) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(DimensionError):
        diagonal_constancy(np.zeros((3, 4)))


def test_constancy_iid_near_zero():
    scores = [diagonal_constancy(np.random.default_rng(s).standard_normal((200, 200))) for s in range(20)]
    assert max(abs(s) for s in scores) < 0.1


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(2, 12)).map(lambda t: (t[0], t[0])), elements=st.floats(-10, 10)),
    st.floats(-100, 100),
)
def test_constancy_shift_invariant(m, c):
    assert diagonal_constancy(m + c) == pytest.approx(diagonal_constancy(m), abs=1e-6)


def test_bandwidth():
    m = np.eye(20) + np.eye(20, k=1) + np.eye(20, k=-1)
    assert bandwidth_estimate(m) == 1
    assert bandwidth_estimate(np.eye(20)) == 0
    assert bandwidth_estimate(np.zeros((5, 5))) == 0
    # under 2% of the mass lies off the main diagonal
    m = np.eye(20) * 10 + np.eye(20, k=3) + np.eye(20, k=-3) + np.eye(20, k=9) * 0.1
    assert bandwidth_estimate(m) == 0
    assert bandwidth_estimate(m, tail=0.001) == 3
    assert bandwidth_estimate(m, tail=1e-5) == 9


# ---------------------------------------------------------------- identity probe


def test_probe_zero_weights():
    p = init_params(PROBE_CFG, 0)
    for name in ("w1", "b1", "w2", "b2"):
        p[f"block.0.token.{name}"][...] = 0
    res = identity_probe(p, 0)
    assert res.matrix.shape == (200, 200)
    assert np.all(res.matrix == 0) and res.diagonal_constancy == 1.0


def test_probe_circulant_is_toeplitz(rng):
    p = init_params(PROBE_CFG, 0)
    p["block.1.token.w1"][...] = circulant(rng.standard_normal(200)).T
    p["block.1.token.w2"][...] = circulant(rng.standard_normal(200)).T
    p["block.1.token.b1"][...] = 0
    p["block.1.token.b2"][...] = 0.3
    m = identity_probe(p, 1).matrix.astype(np.float64)
    for k in range(-199, 200):
        d = np.diagonal(m, k)
        assert np.ptp(d) <= 1e-4 * max(1.0, np.abs(d).max())
    assert identity_probe(p, 1).diagonal_constancy == pytest.approx(1.0, abs=1e-6)


def test_probe_random_init_not_toeplitz():
    scores = []
    for seed in range(100):
        p = init_params(PROBE_CFG, seed)
        scores.append(identity_probe(p, 0).diagonal_constancy)
    assert max(scores) < 0.2


def test_probe_matches_column_oracle(rng):
    p = init_params(PROBE_CFG, 3)
    for name in ("b1", "b2"):
        p[f"block.1.token.{name}"][...] = rng.standard_normal(p[f"block.1.token.{name}"].shape) * 0.1
    w1, b1 = p["block.1.token.w1"].astype(np.float64), p["block.1.token.b1"].astype(np.float64)
    w2, b2 = p["block.1.token.w2"].astype(np.float64), p["block.1.token.b2"].astype(np.float64)
    oracle = np.empty((200, 200))
    for i in range(200):
        e = np.zeros(200)
        e[i] = 1.0
        oracle[i] = gelu_ref(e @ w1 + b1[0]) @ w2 + b2[0]
    assert np.allclose(identity_probe(p, 1).matrix, oracle, atol=1e-5)


def test_probe_errors():
    p = init_params(PROBE_CFG, 0)
    with pytest.raises(DimensionError):
        identity_probe(p, 2)
    abl = init_params(ModelConfig(n_blocks=1, seq_len=20, d_phoneme=8, d_pitch=4, d_mel=6, hidden_channel=8, ablate_token_mixer=True), 0)
    with pytest.raises(CapabilityError):
        identity_probe(abl, 0)


# ---------------------------------------------------------------- loss profile

SMALL = ModelConfig(n_blocks=1, seq_len=30, d_phoneme=8, d_pitch=4, d_mel=12, hidden_channel=16, hidden_token=10)


def segments(rng, n, cfg=SMALL, full=True):
    out = []
    for _ in range(n):
        mask = np.ones(cfg.seq_len, bool)
        if not full:
            mask[rng.integers(1, cfg.seq_len) :] = False
        out.append(
            SegmentExample(
                rng.integers(0, 25, cfg.seq_len).astype(np.int32),
                rng.integers(0, 69, cfg.seq_len).astype(np.int32),
                rng.standard_normal((cfg.seq_len, cfg.d_mel)).astype(np.float32),
                mask,
            )
        )
    return out


def test_profile_perfect_model_is_zero(rng):
    p = init_params(SMALL, 0)
    segs = segments(rng, 5, full=False)
    pred = forward(stack(segs).pitch_ids, stack(segs).phoneme_ids, p)
    perfect = [SegmentExample(s.pitch_ids, s.phoneme_ids, pred[i], s.mask) for i, s in enumerate(segs)]
    assert np.all(loss_profile(p, perfect) == 0)


def test_profile_decomposition_identity(rng):
    p = init_params(SMALL, 1)
    segs = segments(rng, 9)
    prof = loss_profile(p, segs)
    b = stack(segs)
    overall = l1_loss(forward(b.pitch_ids, b.phoneme_ids, p), b.target, b.mask)
    assert prof.shape == (30,)
    assert abs(prof.sum() / 30 - overall) < 1e-6


def test_profile_ignores_padding(rng):
    p = init_params(SMALL, 1)
    segs = segments(rng, 6, full=False)
    prof = loss_profile(p, segs)
    b = stack(segs)
    pred = forward(b.pitch_ids, b.phoneme_ids, p)
    for pos in (0, 7, 29):
        rows = b.mask[:, pos]
        ref = np.abs(pred[rows, pos].astype(np.float64) - b.target[rows, pos]).mean() if rows.any() else 0.0
        assert prof[pos] == pytest.approx(ref, abs=1e-9)
    with pytest.raises(DegenerateInputError):
        loss_profile(p, [])


def test_edge_middle_ratio():
    prof = np.ones(200)
    prof[:10] = prof[-10:] = 3.0
    assert edge_middle_ratio(prof) == 3.0
    prof[50:150] = 2.0
    assert edge_middle_ratio(prof) == 1.5
    assert edge_middle_ratio(prof, middle=(10, 190)) == pytest.approx(3.0 * 180 / 280)
    short = np.r_[np.full(5, 4.0), np.ones(40), np.full(5, 4.0)]
    assert edge_middle_ratio(short, edge=5) == 4.0
    for kw in (dict(edge=30), dict(middle=(40, 60)), dict(middle=(20, 20))):
        with pytest.raises(DimensionError):
            edge_middle_ratio(short, **kw)


# ---------------------------------------------------------------- heatmaps


def test_pgm_examples(tmp_path):
    assert to_pgm_pixels(np.array([[0.0, 1.0], [1.0, 0.0]])).tolist() == [[0, 255], [255, 0]]
    pgm, _ = export_heatmap(np.full((3, 5), 2.0), tmp_path / "c")
    assert pgm.read_bytes().startswith(b"P5\n5 3\n255\n")
    assert np.all(read_pgm(pgm) == 128) and read_pgm(pgm).shape == (3, 5)


def test_csv_round_trip(rng, tmp_path):
    m = rng.standard_normal((11, 11)).astype(np.float32)
    pgm, csv_path = export_heatmap(m, tmp_path / "probe_block0.pgm")
    assert csv_path.name == "probe_block0.csv"
    assert np.allclose(read_csv_matrix(csv_path), m, atol=1e-6, rtol=0)
    assert read_pgm(pgm).min() == 0 and read_pgm(pgm).max() == 255
