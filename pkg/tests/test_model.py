import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.lib.stride_tricks import sliding_window_view

from numgrad import check_parameters
from slicerecovery import model as M
from slicerecovery import tensor as T
from slicerecovery.errors import (CheckpointMismatchError, DimensionError, FormatError, LossError,
                                  ParameterError)
from slicerecovery.tensor import Tensor
from slicerecovery.volume import ChannelStats

TOY = M.ModelConfig(layers=2, heads=2, embed_dim=8, ff_dim=12, dropout_p=0.0, crop_shape=(8, 7, 8))


# ------------------------------------------------------------ straight-line oracle

def fiber_attention(seq, wq, wk, wv, wo, heads):
    """One sequence (n, D): per-head scaled dot-product attention written with loops."""
    n, d = seq.shape
    dh = d // heads
    out_heads = []
    weights = []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        q, k, v = seq @ wq[:, cols], seq @ wk[:, cols], seq @ wv[:, cols]
        a = np.empty((n, n))
        for i in range(n):
            s = np.array([q[i] @ k[j] for j in range(n)]) / math.sqrt(dh)
            e = np.exp(s - s.max())
            a[i] = e / e.sum()
        weights.append(a)
        out_heads.append(a @ v)
    return np.concatenate(out_heads, axis=1) @ wo, weights


def oracle_axial(x, axis, wq, wk, wv, wo, heads):
    out = np.empty_like(x)
    others = [range(n) for a, n in enumerate(x.shape[:-1]) if a != axis]
    for idx in np.ndindex(*[len(r) for r in others]):
        sel = list(idx)
        sel.insert(axis, slice(None))
        out[tuple(sel)] = fiber_attention(x[tuple(sel)], wq, wk, wv, wo, heads)[0]
    return out


def oracle_layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def oracle_gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def oracle_conv(x, w, b):
    xp = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3, 3), axis=(0, 1, 2))
    return np.einsum("ijkcabe,abecf->ijkf", win, w) + b


def oracle_forward(params, cfg, x):
    p = {k: v.data for k, v in params.items()}
    h = x @ p["embed.weight"] + p["embed.bias"]
    h = h + p["pos.axis0"][:, None, None] + p["pos.axis1"][None, :, None] + p["pos.axis2"][None, None]
    for i in range(cfg.layers):
        for a in range(3):
            pre = f"layers.{i}.attn{a}"
            n = oracle_layer_norm(h, p[f"{pre}.norm.gamma"], p[f"{pre}.norm.beta"])
            h = h + oracle_axial(n, a, p[f"{pre}.wq"], p[f"{pre}.wk"], p[f"{pre}.wv"], p[f"{pre}.wo"], cfg.heads)
        pre = f"layers.{i}.ff"
        n = oracle_layer_norm(h, p[f"{pre}.norm.gamma"], p[f"{pre}.norm.beta"])
        n = oracle_conv(oracle_gelu(oracle_conv(n, p[f"{pre}.conv1.weight"], p[f"{pre}.conv1.bias"])),
                        p[f"{pre}.conv2.weight"], p[f"{pre}.conv2.bias"])
        h = h + n
    return h @ p["head.weight"] + p["head.bias"]


def oracle_loss(pred, target, m, e):
    total = 0.0
    for i in range(e.shape[0]):
        for k in range(e.shape[1]):
            if e[i, k]:
                for c in range(pred.shape[-1]):
                    total += (pred[i, m, k, c] - target[i, m, k, c]) ** 2
    return total / e.sum()


def random_weights(rng, d, scale=0.5):
    return [Tensor(rng.standard_normal((d, d)) * scale) for _ in range(4)]


def perturbed_state(cfg, seed):
    """Initialized state with non-trivial norms and biases so every path is exercised."""
    state = M.ModelState.initialize(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    for name, p in state.named_parameters():
        if name.endswith((".gamma", ".beta", ".bias")):
            p.data += rng.normal(0, 0.3, p.shape)
    return state


# ------------------------------------------------------------------- attention

class TestAxialAttention:
    @pytest.mark.parametrize("axis", [0, 1, 2])
    def test_matches_fiber_oracle(self, axis):
        rng = np.random.default_rng(axis)
        x = rng.standard_normal((2, 3, 4, 8))
        w = random_weights(rng, 8)
        got = M.axial_attention(Tensor(x), axis, *w, heads=2).data
        expected = oracle_axial(x, axis, *[t.data for t in w], heads=2)
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)

    def test_single_fiber_is_full_attention(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 5, 1, 4))
        w = random_weights(rng, 4)
        got = M.axial_attention(Tensor(x), 1, *w, heads=1).data[0, :, 0]
        expected, _ = fiber_attention(x[0, :, 0], *[t.data for t in w], heads=1)
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_identical_vectors_give_projected_value(self):
        rng = np.random.default_rng(4)
        vec = rng.standard_normal(8)
        x = np.broadcast_to(vec, (1, 6, 1, 8)).copy()
        wq, wk, wv, wo = random_weights(rng, 8)
        got = M.axial_attention(Tensor(x), 1, wq, wk, wv, wo, heads=4).data
        np.testing.assert_allclose(got[0, :, 0], np.tile(vec @ wv.data @ wo.data, (6, 1)), atol=1e-12)

    @pytest.mark.parametrize("axis", [-1, 3])
    def test_bad_axis(self, axis):
        w = random_weights(np.random.default_rng(0), 4)
        with pytest.raises(ParameterError):
            M.axial_attention(Tensor(np.zeros((2, 2, 2, 4))), axis, *w, heads=2)

    def test_heads_must_divide(self):
        w = random_weights(np.random.default_rng(0), 6)
        with pytest.raises(ParameterError):
            M.axial_attention(Tensor(np.zeros((2, 2, 2, 6))), 0, *w, heads=4)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2), st.permutations([0, 1, 2, 3]), st.permutations([0, 1, 2]))
    def test_equivariant_to_fiber_permutations(self, axis, p1, p2):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 3, 4, 4))
        w = random_weights(rng, 4)
        # permute positions along one non-attended axis
        other = [a for a in range(3) if a != axis][0]
        perm = p1 if x.shape[other] == 4 else p2
        moved = np.take(x, perm, axis=other)
        before = np.take(M.axial_attention(Tensor(x), axis, *w, heads=2).data, perm, axis=other)
        after = M.axial_attention(Tensor(moved), axis, *w, heads=2).data
        assert np.array_equal(before, after)

    def test_attention_rows_convex(self):
        rng = np.random.default_rng(6)
        seq = rng.standard_normal((7, 8)) * 3
        _, weights = fiber_attention(seq, *[t.data for t in random_weights(rng, 8)], heads=2)
        # cross-check the library softmax on the same scores
        for a in weights:
            assert np.all(a >= 0)
            np.testing.assert_allclose(a.sum(1), 1, atol=1e-12)
        scores = Tensor(rng.standard_normal((5, 7)) * 10)
        rows = T.softmax_rows(scores).data
        assert np.all(rows >= 0)
        np.testing.assert_allclose(rows.sum(1), 1, atol=1e-12)


# ---------------------------------------------------------------------- model

class TestForward:
    def test_matches_straight_line_oracle(self):
        state = perturbed_state(TOY, 0)
        x = np.random.default_rng(7).standard_normal((8, 7, 8, 3))
        got = M.forward(state, x).data
        np.testing.assert_allclose(got, oracle_forward(state.params, TOY, x), rtol=0, atol=1e-10)

    def test_output_shape_and_determinism(self):
        state = M.ModelState.initialize(TOY, 1)
        x = np.random.default_rng(8).standard_normal((8, 7, 8, 3))
        a, b = M.forward(state, x).data, M.forward(state, x).data
        assert a.shape == (8, 7, 8, 3)
        assert np.array_equal(a, b)

    def test_wrong_shape(self):
        with pytest.raises(DimensionError):
            M.forward(M.ModelState.initialize(TOY, 0), np.zeros((8, 5, 8, 3)))

    def test_dropout_training_differs_from_eval(self):
        cfg = M.ModelConfig(layers=1, heads=2, embed_dim=8, ff_dim=8, dropout_p=0.5, crop_shape=(4, 3, 4))
        state = M.ModelState.initialize(cfg, 0)
        x = np.random.default_rng(9).standard_normal((4, 3, 4, 3))
        ev = M.forward(state, x).data
        tr = M.forward(state, x, training=True, rng=np.random.default_rng(0)).data
        assert not np.array_equal(ev, tr)

    def test_zero_output_projections_make_identity_layer(self):
        state = perturbed_state(TOY, 2)
        for name, p in state.named_parameters():
            if name.endswith((".wo", "conv2.weight", "conv2.bias")):
                p.data[...] = 0.0
        x = Tensor(np.random.default_rng(10).standard_normal((8, 7, 8, 8)))
        assert np.array_equal(M.encoder_layer(state, 0, x).data, x.data)

    def test_layer_preserves_shape(self):
        state = M.ModelState.initialize(TOY, 3)
        x = Tensor(np.random.default_rng(11).standard_normal((8, 7, 8, 8)))
        assert M.encoder_layer(state, 1, x).shape == x.shape

    def test_full_model_gradients(self):
        state = perturbed_state(TOY, 4)
        rng = np.random.default_rng(12)
        x = rng.standard_normal((8, 7, 8, 3))
        target = rng.standard_normal((8, 7, 8, 3))
        boundary = rng.random((8, 8)) < 0.5

        def loss():
            return M.boundary_masked_loss(M.forward(state, x), target, 3, boundary)

        worst = check_parameters(loss, state.params, samples=4)
        assert max(worst.values()) < 1e-4, {k: v for k, v in worst.items() if v >= 1e-4}


# ------------------------------------------------------------------------ loss

class TestLoss:
    def test_zero_when_exact(self):
        x = np.random.default_rng(13).standard_normal((4, 7, 5, 3))
        assert M.boundary_masked_loss(Tensor(x), x, 2, np.ones((4, 5), bool)).data == 0.0

    def test_single_voxel(self):
        pred = np.zeros((2, 3, 2, 3))
        pred[1, 1, 0] = [1, 2, 2]
        e = np.zeros((2, 1, 2), bool)
        e[1, 0, 0] = True
        assert M.boundary_masked_loss(Tensor(pred), np.zeros_like(pred), 1, e).data == 9.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            pred, target = rng.standard_normal((2, 6, 7, 5, 3))
            e = rng.random((6, 5)) < 0.4
            e[rng.integers(6), rng.integers(5)] = True
            m = int(rng.integers(7))
            got = M.boundary_masked_loss(Tensor(pred), target, m, e).data.item()
            assert got == pytest.approx(oracle_loss(pred, target, m, e), rel=1e-12)

    def test_zero_iff_boundary_matches(self):
        rng = np.random.default_rng(15)
        target = rng.standard_normal((5, 7, 5, 3))
        e = rng.random((5, 5)) < 0.5
        e[0, 0] = True
        pred = target + rng.standard_normal(target.shape)
        pred[:, 3][e] = target[:, 3][e]
        assert M.boundary_masked_loss(Tensor(pred), target, 3, e).data == 0.0
        pred[0, 3, 0, 1] += 1e-3
        assert M.boundary_masked_loss(Tensor(pred), target, 3, e).data > 0.0

    def test_empty_mask(self):
        with pytest.raises(LossError):
            M.boundary_masked_loss(Tensor(np.zeros((2, 3, 2, 3))), np.zeros((2, 3, 2, 3)), 1, np.zeros((2, 2), bool))

    def test_mask_shape(self):
        with pytest.raises(DimensionError):
            M.boundary_masked_loss(Tensor(np.zeros((2, 3, 2, 3))), np.zeros((2, 3, 2, 3)), 1, np.ones((3, 2), bool))


# -------------------------------------------------------------- parameter count

class TestParamCount:
    def test_default_config_just_under_thirty_million(self):
        n = M.param_count(M.ModelConfig())
        assert 28_000_000 <= n <= 30_000_000
        assert n == 29_915_907

    def test_analytic_sum(self):
        d, f = 128, 512
        per_layer = 3 * (4 * d * d + 2 * d) + 2 * d + 27 * d * f + f + 27 * f * d + d
        fixed = 3 * d + d + (64 + 7 + 64) * d + d * 3 + 3
        assert M.param_count(M.ModelConfig()) == fixed + 8 * per_layer

    def test_zero_layers(self):
        cfg = M.ModelConfig(layers=0, embed_dim=16, heads=4, crop_shape=(5, 7, 6))
        assert M.param_count(cfg) == (3 * 16 + 16) + (5 + 7 + 6) * 16 + (16 * 3 + 3)

    @pytest.mark.parametrize("ff", [8, 64, 511])
    def test_increasing_in_ff_dim(self, ff):
        small = M.ModelConfig(ff_dim=ff)
        big = M.ModelConfig(ff_dim=ff + 1)
        assert M.param_count(big) > M.param_count(small)

    def test_heads_do_not_change_count(self):
        assert M.param_count(M.ModelConfig(heads=4)) == M.param_count(M.ModelConfig(heads=8))

    def test_count_matches_state(self):
        state = M.ModelState.initialize(TOY, 0)
        assert sum(p.data.size for p in state.parameters()) == M.param_count(TOY)

    def test_invalid_config(self):
        with pytest.raises(ParameterError):
            M.ModelConfig(embed_dim=10, heads=4)


# -------------------------------------------------------------------- init/ckpt

class TestStateAndCheckpoint:
    def test_initialization_ranges(self):
        state = M.ModelState.initialize(TOY, 0)
        assert np.all(state["layers.0.attn0.norm.gamma"].data == 1.0)
        assert np.all(state["head.bias"].data == 0.0)
        bound = 1 / math.sqrt(27 * TOY.embed_dim)
        assert np.abs(state["layers.0.ff.conv1.weight"].data).max() <= bound
        assert np.abs(state["pos.axis0"].data).std() < 0.05

    def test_initialization_deterministic(self):
        a, b = M.ModelState.initialize(TOY, 5), M.ModelState.initialize(TOY, 5)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a.params)

    def test_round_trip(self, tmp_path):
        state = perturbed_state(TOY, 6)
        stats = ChannelStats(np.array([0.1, 0.2, 0.3]), np.array([1.0, 2.0, 3.0]))
        buffers = {"velocity.head.bias": np.arange(3.0)}
        path = tmp_path / "m.ckpt"
        M.save_checkpoint(path, state, stats, {"step": 7}, buffers)
        loaded, s2, extra, buf = M.load_checkpoint(path, expect=TOY)
        assert all(np.array_equal(loaded[k].data, state[k].data) for k in state.params)
        assert np.array_equal(s2.std, stats.std) and extra == {"step": 7}
        assert np.array_equal(buf["velocity.head.bias"], np.arange(3.0))

    def test_config_mismatch(self, tmp_path):
        path = tmp_path / "m.ckpt"
        M.save_checkpoint(path, M.ModelState.initialize(TOY, 0))
        other = M.ModelConfig(layers=1, heads=2, embed_dim=8, ff_dim=12, dropout_p=0.0, crop_shape=(8, 7, 8))
        with pytest.raises(CheckpointMismatchError):
            M.load_checkpoint(path, expect=other)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"hello world")
        with pytest.raises(FormatError):
            M.load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.ckpt"
        M.save_checkpoint(path, M.ModelState.initialize(TOY, 0))
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(FormatError):
            M.load_checkpoint(path)

    def test_copy_is_independent(self):
        state = M.ModelState.initialize(TOY, 0)
        twin = state.copy()
        twin["head.bias"].data[...] = 5.0
        assert np.all(state["head.bias"].data == 0.0)
