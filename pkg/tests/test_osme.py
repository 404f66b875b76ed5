import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osmemamc import tensor as T
from osmemamc.errors import BranchOutOfRange, ShapeMismatch
from osmemamc.osme import (OsmeConfig, Stage, attend, backbone_forward, excite, heatmap, heatmap_peak,
                           init_params, osme_forward, read_pgm, reweight, squeeze, write_pgm, zero_params)
from osmemamc.tensor import Tensor

MICRO = OsmeConfig(P=2, C=4, r=2, D=3, K=3, input_hw=(4, 4), backbone=(Stage(4),))


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


@pytest.fixture
def params():
    return init_params(MICRO, np.random.default_rng(0))


# --- config -------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        OsmeConfig(C=32, r=5)
    with pytest.raises(ValueError):
        OsmeConfig(P=0)
    with pytest.raises(ValueError):
        OsmeConfig(C=16)  # last stage has 32 channels
    with pytest.raises(ValueError):
        OsmeConfig(input_hw=(6, 6))  # not divisible by two 2x pools
    assert OsmeConfig().feature_hw == (4, 4)
    assert OsmeConfig().fc_in == 4 * 4 * 32
    assert OsmeConfig(pool_before_fc=True).fc_in == 32


def test_param_shapes_and_independence():
    cfg = OsmeConfig()
    params = init_params(cfg, np.random.default_rng(1))
    assert params["branch.0.W1"].shape == (8, 32)
    assert params["branch.0.W2"].shape == (32, 8)
    assert params["branch.0.W3"].shape == (16, 512)
    assert params["classifier.weight"].shape == (8, 32)
    assert params["classifier.bias"].shape == (8,)
    for name in ("W1", "W2", "W3"):
        a, b = params[f"branch.0.{name}"], params[f"branch.1.{name}"]
        assert a is not b and not np.array_equal(a.data, b.data)
    w = params["branch.0.W3"].data
    assert np.abs(w).max() <= 1 / math.sqrt(512)


# --- backbone -----------------------------------------------------------------

def test_zero_backbone_gives_zero_map():
    cfg = OsmeConfig()
    U = backbone_forward(zero_params(cfg), Tensor(np.zeros((16, 16, 1))), cfg)
    assert U.shape == (4, 4, 32) and not U.data.any()


def test_backbone_shape_and_determinism():
    cfg = OsmeConfig()
    img = Tensor(np.random.default_rng(2).uniform(size=(16, 16, 1)))
    a = backbone_forward(init_params(cfg, np.random.default_rng(3)), img, cfg).data
    b = backbone_forward(init_params(cfg, np.random.default_rng(3)), img, cfg).data
    assert a.shape == (4, 4, 32)
    assert np.array_equal(a, b)


def test_backbone_rejects_wrong_image_shape(params):
    with pytest.raises(ShapeMismatch):
        backbone_forward(params, Tensor(np.zeros((5, 4, 1))), MICRO)


# --- squeeze ------------------------------------------------------------------

def test_squeeze_constant():
    assert squeeze(Tensor(np.full((3, 3, 5), 2.5))).data.tolist() == [2.5] * 5


def test_squeeze_single_cell():
    U = np.zeros((2, 2, 3))
    U[1, 0, 0] = 1.0
    assert squeeze(Tensor(U)).data[0] == 0.25


def test_squeeze_matches_loop():
    U = np.random.default_rng(4).normal(size=(3, 5, 4))
    ref = [sum(U[i, j, c] for i in range(3) for j in range(5)) / 15 for c in range(4)]
    np.testing.assert_allclose(squeeze(Tensor(U)).data, ref, atol=1e-12)


@given(st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_squeeze_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    U = rng.normal(size=(3, 4, 5))
    perm = rng.permutation(12)
    shuffled = U.reshape(12, 5)[perm].reshape(3, 4, 5)
    np.testing.assert_allclose(squeeze(Tensor(U)).data, squeeze(Tensor(shuffled)).data, atol=1e-14)


# --- excite -------------------------------------------------------------------

def test_excite_zero_weights(params):
    local = dict(params, **{"branch.1.W1": Tensor(np.zeros((2, 4))), "branch.1.W2": Tensor(np.zeros((4, 2)))})
    assert excite(Tensor([1.0, 2.0, 3.0, 4.0]), local, 1, MICRO).data.tolist() == [0.5] * 4


def test_excite_zero_input(params):
    assert excite(Tensor(np.zeros(4)), params, 0, MICRO).data.tolist() == [0.5] * 4


def test_excite_hand_weights(params):
    W1 = np.array([[0.1, -0.2, 0.3, 0.0], [0.5, 0.5, -0.5, 0.25]])
    W2 = np.array([[1.0, -1.0], [0.5, 0.0], [-0.3, 2.0], [0.0, 0.0]])
    z = [1.0, 2.0, 0.5, -1.0]
    local = dict(params, **{"branch.0.W1": Tensor(W1), "branch.0.W2": Tensor(W2)})
    h = [max(0.0, sum(W1[j, c] * z[c] for c in range(4))) for j in range(2)]
    ref = [sigmoid(sum(W2[c, j] * h[j] for j in range(2))) for c in range(4)]
    np.testing.assert_allclose(excite(Tensor(z), local, 0, MICRO).data, ref, rtol=1e-14)


def test_excite_branch_range(params):
    with pytest.raises(BranchOutOfRange):
        excite(Tensor(np.zeros(4)), params, 2, MICRO)
    with pytest.raises(BranchOutOfRange):
        excite(Tensor(np.zeros(4)), params, -1, MICRO)


def test_mask_strictly_inside_unit_interval(params):
    z = Tensor(np.random.default_rng(5).uniform(0, 3, size=(6, 4)))
    for p in range(2):
        m = excite(z, params, p, MICRO).data
        assert np.all((m > 0) & (m < 1))


# --- reweight -----------------------------------------------------------------

def test_reweight_zero_mask():
    assert not reweight(Tensor(np.ones((2, 2, 3))), Tensor(np.zeros(3))).data.any()


def test_reweight_single_channel_half():
    S = reweight(Tensor(np.full((2, 2, 3), 2.0)), Tensor([0.5, 1.0, 0.25])).data
    assert np.all(S[..., 0] == 1.0) and np.all(S[..., 1] == 2.0) and np.all(S[..., 2] == 0.5)


def test_reweight_matches_loop_and_is_linear():
    rng = np.random.default_rng(6)
    U, m = rng.normal(size=(3, 2, 4)), rng.uniform(size=4)
    S = reweight(Tensor(U), Tensor(m)).data
    for i in range(3):
        for j in range(2):
            for c in range(4):
                assert abs(S[i, j, c] - m[c] * U[i, j, c]) <= 1e-12
    np.testing.assert_allclose(reweight(Tensor(3.5 * U), Tensor(m)).data, 3.5 * S, rtol=1e-14)


def test_reweight_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        reweight(Tensor(np.ones((2, 2, 3))), Tensor(np.ones(4)))


# --- attend -------------------------------------------------------------------

def test_attend_zero_map(params):
    assert not attend(Tensor(np.zeros((2, 2, 4))), params, 0, MICRO).data.any()


def test_attend_identity_rows(params):
    S = np.random.default_rng(7).normal(size=(2, 2, 4))
    W3 = np.zeros((3, 16))
    W3[np.arange(3), np.arange(3)] = 1.0
    f = attend(Tensor(S), dict(params, **{"branch.1.W3": Tensor(W3)}), 1, MICRO).data
    np.testing.assert_array_equal(f, S.reshape(-1)[:3])


def test_attend_matches_loop(params):
    S = np.random.default_rng(8).normal(size=(2, 2, 4))
    W3 = params["branch.0.W3"].data
    vec = [S[i, j, c] for i in range(2) for j in range(2) for c in range(4)]
    ref = [sum(W3[d, k] * vec[k] for k in range(16)) for d in range(3)]
    np.testing.assert_allclose(attend(Tensor(S), params, 0, MICRO).data, ref, atol=1e-12)


def test_attend_shape_mismatch(params):
    with pytest.raises(ShapeMismatch):
        attend(Tensor(np.zeros((3, 3, 4))), params, 0, MICRO)


def test_pool_before_fc():
    cfg = OsmeConfig(P=1, C=4, r=2, D=3, K=2, input_hw=(4, 4), pool_before_fc=True, backbone=(Stage(4),))
    params = init_params(cfg, np.random.default_rng(9))
    assert params["branch.0.W3"].shape == (3, 4)
    S = np.random.default_rng(10).normal(size=(2, 2, 4))
    ref = params["branch.0.W3"].data @ S.mean(axis=(0, 1))
    np.testing.assert_allclose(attend(Tensor(S), params, 0, cfg).data, ref, atol=1e-12)


# --- full forward -------------------------------------------------------------

def test_degenerate_single_branch():
    cfg = OsmeConfig(P=1, C=4, r=2, D=3, K=2, input_hw=(4, 4), backbone=(Stage(4),))
    out = osme_forward(init_params(cfg, np.random.default_rng(11)), Tensor(np.random.default_rng(12).uniform(size=(2, 4, 4, 1))), cfg)
    assert out.features.shape == (2, 1, 3) and out.logits.shape == (2, 2)


def test_duplicate_images_identical_rows(params):
    img = np.random.default_rng(13).uniform(size=(4, 4, 1))
    out = osme_forward(params, Tensor(np.stack([img, img])), MICRO)
    assert np.array_equal(out.features.data[0], out.features.data[1])
    assert np.array_equal(out.logits.data[0], out.logits.data[1])


def test_forward_matches_scripted_evaluation():
    """N=2, P=2 micro net evaluated image by image with plain numpy loops."""
    cfg = OsmeConfig(P=2, C=4, r=2, D=3, K=3, input_hw=(4, 4), backbone=(Stage(4),))
    params = init_params(cfg, np.random.default_rng(14))
    images = np.random.default_rng(15).uniform(size=(4, 4, 4, 1))
    out = osme_forward(params, Tensor(images), cfg)
    g = {k: v.data for k, v in params.items()}
    for n in range(4):
        x = images[n]
        conv = np.zeros((4, 4, 4))
        for i in range(4):
            for j in range(4):
                for o in range(4):
                    acc = g["backbone.0.bias"][o]
                    for di in range(3):
                        for dj in range(3):
                            ii, jj = i + di - 1, j + dj - 1
                            if 0 <= ii < 4 and 0 <= jj < 4:
                                acc += x[ii, jj, 0] * g["backbone.0.weight"][di, dj, 0, o]
                    conv[i, j, o] = max(acc, 0.0)
        U = np.array([[[conv[2 * i: 2 * i + 2, 2 * j: 2 * j + 2, c].max() for c in range(4)]
                       for j in range(2)] for i in range(2)])
        z = U.mean(axis=(0, 1))
        feats = []
        for p in range(2):
            h = np.maximum(g[f"branch.{p}.W1"] @ z, 0)
            m = 1 / (1 + np.exp(-(g[f"branch.{p}.W2"] @ h)))
            feats.append(g[f"branch.{p}.W3"] @ (U * m).reshape(-1))
        logits = g["classifier.weight"] @ np.concatenate(feats) + g["classifier.bias"]
        np.testing.assert_allclose(out.features.data[n], np.stack(feats), atol=1e-12)
        np.testing.assert_allclose(out.logits.data[n], logits, atol=1e-12)


def test_branch_independence(params):
    images = Tensor(np.random.default_rng(16).uniform(size=(2, 4, 4, 1)))
    before = osme_forward(params, images, MICRO).features.data
    rng = np.random.default_rng(17)
    perturbed = dict(params)
    for name in ("W1", "W2", "W3"):
        perturbed[f"branch.1.{name}"] = Tensor(rng.normal(size=params[f"branch.1.{name}"].shape))
    after = osme_forward(perturbed, images, MICRO).features.data
    assert np.array_equal(before[:, 0], after[:, 0])
    assert not np.array_equal(before[:, 1], after[:, 1])


# --- heatmaps -----------------------------------------------------------------

def test_heatmap_constant_is_zero():
    assert not heatmap(np.full((3, 3, 2), 4.0)).any()


def test_heatmap_single_cell():
    S = np.zeros((3, 4, 2))
    S[2, 1] = [1.0, 3.0]
    hm = heatmap(S)
    assert hm[2, 1] == 1.0 and hm.sum() == 1.0
    assert heatmap_peak(hm) == (2, 1)


def test_heatmap_matches_loop():
    S = np.random.default_rng(18).normal(size=(3, 4, 5))
    raw = np.array([[sum(S[i, j, c] for c in range(5)) / 5 for j in range(4)] for i in range(3)])
    ref = (raw - raw.min()) / (raw.max() - raw.min())
    np.testing.assert_allclose(heatmap(Tensor(S)), ref, atol=1e-12)


def test_heatmap_rejects_batch():
    with pytest.raises(ShapeMismatch):
        heatmap(np.zeros((1, 2, 2, 3)))


def test_pgm_round_trip(tmp_path):
    hm = np.random.default_rng(19).uniform(size=(4, 6))
    hm[0, 0] = 0.0
    write_pgm(tmp_path / "a.pgm", hm)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n6 4\n255\n") and len(raw) == len(b"P5\n6 4\n255\n") + 24
    np.testing.assert_allclose(read_pgm(tmp_path / "a.pgm"), np.rint(hm * 255) / 255)


def test_end_to_end_gradient(params):
    from osmemamc.gradcheck import grad_check
    images = Tensor(np.random.default_rng(20).uniform(size=(2, 4, 4, 1)))
    names = sorted(params)

    def loss(*ts):
        out = osme_forward(dict(zip(names, ts)), images, MICRO)
        return T.softmax_cross_entropy(out.logits, [0, 2])

    assert grad_check(loss, [params[n].data for n in names]) <= 1e-4
