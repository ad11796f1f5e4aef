import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from amgprune import criteria as C
from amgprune.errors import ClassTokenProtectionError, ContractError, NotCalibratedError
from amgprune.tensor import Tensor
from amgprune.vit import AttentionCapture, apply_kv_index, forward, zero_mask_heads

from conftest import images_for, randomized, tiny_spec
from oracles import ce_sum, straight_line_logits


def capture_of(maps, grads=None, layer=0, kv=None):
    """Capture holding one sample whose maps are ``maps`` ``[H, Nq, Nkv]``."""
    cap = AttentionCapture()
    a = Tensor(np.asarray(maps, dtype=float)[None], requires_grad=grads is not None)
    cap.observe(layer, a, kv)
    if grads is not None:
        a.grad = np.asarray(grads, dtype=float)[None]
        cap.collect_gradients()
    return cap


def row_stochastic(n_rows, n_cols):
    return hnp.arrays(np.float64, (n_rows, n_cols), elements=st.floats(0.0, 1.0)).filter(
        lambda m: (m.sum(axis=1) > 1e-3).all()
    ).map(lambda m: m / m.sum(axis=1, keepdims=True))


class TestHeadEntropy:
    def test_uniform_4x4(self):
        cap = capture_of(np.full((1, 4, 4), 0.25))
        assert C.head_entropy(cap, 0, 0) == pytest.approx(4 * math.log(4), abs=1e-9)
        assert C.head_entropy(cap, 0, 0) == pytest.approx(5.5452, abs=1e-4)

    def test_one_hot_rows(self):
        cap = capture_of(np.eye(5)[None])
        assert C.head_entropy(cap, 0, 0) == 0.0

    def test_half_half_example(self):
        cap = capture_of([[[0.5, 0.5], [1.0, 0.0]]])
        assert C.head_entropy(cap, 0, 0) == pytest.approx(math.log(2), abs=1e-12)

    def test_missing_capture(self):
        with pytest.raises(NotCalibratedError):
            C.head_entropy(AttentionCapture(), 0, 0)

    def test_per_sample_mode_never_exceeds_averaged(self):
        cap = AttentionCapture()
        cap.observe(0, Tensor(np.stack([np.eye(3), np.eye(3)[::-1]])[:, None]), None)
        assert C.head_entropy(cap, 0, 0, "per-sample") == 0.0
        assert C.head_entropy(cap, 0, 0) > 0.0
        with pytest.raises(ContractError):
            C.head_entropy(cap, 0, 0, "median")

    @given(row_stochastic(5, 5), st.permutations(range(5)))
    def test_bounds_and_permutation_invariance(self, m, perm):
        s = C.head_entropy(capture_of(m[None]), 0, 0)
        assert -1e-12 <= s <= 5 * math.log(5) + 1e-9
        p = list(perm)
        assert C.head_entropy(capture_of(m[p][:, p][None]), 0, 0) == pytest.approx(s, abs=1e-9)


class TestTokenImportance:
    def test_zero_gradients(self):
        cap = capture_of(np.full((2, 3, 3), 1 / 3), np.zeros((2, 3, 3)))
        assert all(C.token_importance(cap, 0, t) == 0.0 for t in (1, 2))

    def test_hand_3x3(self):
        A = [[0.2, 0.3, 0.5], [0.1, 0.6, 0.3], [0.4, 0.4, 0.2]]
        G = [[1.0, -2.0, 0.5], [3.0, 1.0, -1.0], [0.0, 2.0, 4.0]]
        cap = capture_of([A], [G])
        # column 1: 0.3*-2 + 0.6*1 + 0.4*2 = 0.8; column 2: 0.25 - 0.3 + 0.8 = 0.75
        assert C.token_importance(cap, 0, 1) == pytest.approx(0.8, abs=1e-12)
        assert C.token_importance(cap, 0, 2) == pytest.approx(0.75, abs=1e-12)
        # row 1 of the same map: 0.1*3 + 0.6*1 + 0.3*-1 = 0.6
        assert C.token_importance(cap, 0, 1, reduction="row") == pytest.approx(0.6, abs=1e-12)

    def test_head_mean_and_absolute_value(self):
        A = np.full((2, 2, 2), 0.5)
        G = np.array([[[1.0, -4.0], [0.0, -2.0]], [[0.0, 1.0], [0.0, 1.0]]])
        cap = capture_of(A, G)
        assert C.token_importance(cap, 0, 1) == pytest.approx(abs((-3.0 + 1.0) / 2), abs=1e-12)

    def test_class_token_protected(self):
        cap = capture_of(np.full((1, 3, 3), 1 / 3), np.ones((1, 3, 3)))
        with pytest.raises(ClassTokenProtectionError):
            C.token_importance(cap, 0, 0)
        with pytest.raises(ClassTokenProtectionError):
            C.token_importance(cap, 0, 0, reduction="row")
        assert all(s.unit_id != 0 for s in C.token_scores(cap))

    def test_requires_gradients(self):
        with pytest.raises(NotCalibratedError):
            C.token_importance(capture_of(np.full((1, 3, 3), 1 / 3)), 0, 1)

    def test_token_outside_kv_set(self):
        cap = capture_of(np.full((1, 3, 2), 0.5), np.ones((1, 3, 2)), kv=[0, 2])
        assert C.token_importance(cap, 0, 2) == pytest.approx(1.5)
        with pytest.raises(ContractError):
            C.token_importance(cap, 0, 1)


def test_token_importance_matches_column_rescaling_fd(tiny):
    model, x = tiny
    x, y = x[:1], np.array([2])
    apply_kv_index(1, [0, 1, 3, 4], model)
    cap = C.calibrate(model, [(x, y)])
    H, step = model.spec.heads_per_layer[0], 1e-5
    for layer, kv in ((0, range(5)), (1, [0, 1, 3, 4])):
        for pos, token in enumerate(kv):
            if token == 0:
                continue

            def loss(eps):
                vec = np.ones(len(kv))
                vec[pos] += eps
                scale = {(layer, h): vec for h in range(H)}
                return ce_sum(straight_line_logits(model.state(), model.spec, x, column_scale=scale), y)

            fd = abs((loss(step) - loss(-step)) / (2 * step)) / H
            got = C.token_importance(cap, layer, token)
            assert abs(got - fd) <= 1e-3 * max(abs(fd), 1e-8)


class TestCalibrate:
    def test_single_sample_is_exact(self, tiny):
        model, x = tiny
        cap = C.calibrate(model, [(x[:1], [0])])
        ref = AttentionCapture()
        forward(model, x[:1], capture=ref)
        np.testing.assert_array_equal(cap.attention(0), ref.attention(0))
        assert cap.samples(0) == 1

    def test_duplicates_match_single(self, tiny):
        model, x = tiny
        one = C.calibrate(model, [(x[:1], [1])])
        many = C.calibrate(model, [(np.repeat(x[:1], 4, axis=0), [1] * 4)])
        for l in range(2):
            np.testing.assert_allclose(many.attention(l), one.attention(l), rtol=0, atol=1e-14)
            np.testing.assert_allclose(many.gradient(l), one.gradient(l), rtol=0, atol=1e-14)

    def test_two_samples_midpoint(self, tiny):
        model, x = tiny
        a = C.calibrate(model, [(x[:1], [0])])
        b = C.calibrate(model, [(x[1:2], [1])])
        both = C.calibrate(model, [(x[:1], [0]), (x[1:2], [1])])
        for l in range(2):
            np.testing.assert_allclose(both.attention(l), (a.attention(l) + b.attention(l)) / 2, atol=1e-15)
            np.testing.assert_allclose(both.gradient(l), (a.gradient(l) + b.gradient(l)) / 2, atol=1e-15)

    def test_rows_stochastic_and_grads_cleared(self, tiny):
        model, x = tiny
        cap = C.calibrate(model, [(x, [0, 1, 2])])
        np.testing.assert_allclose(cap.attention(1).sum(axis=-1), 1.0, atol=1e-9)
        assert all(p.grad is None for p in model.parameters())

    def test_empty_set(self, tiny):
        model, _ = tiny
        with pytest.raises(ContractError):
            C.calibrate(model, [])

    def test_max_batches(self, tiny):
        model, x = tiny
        cap = C.calibrate(model, [(x[:1], [0]), (x[1:2], [1])], max_batches=1)
        assert cap.samples(0) == 1

    def test_loss_scaling_keeps_ranking(self, tiny):
        model, x = tiny
        y = np.array([0, 1, 2])
        base = C.token_scores(C.calibrate(model, [(x, y)]))
        from amgprune import tensor as T
        scaled = C.token_scores(C.calibrate(
            model, [(x, y)], loss=lambda z, t: T.scale(T.cross_entropy(z, t, reduction="sum"), 3.0)))
        for a, b in zip(base, scaled):
            assert b.raw == pytest.approx(3.0 * a.raw, rel=1e-9, abs=1e-15)
        order = lambda s: sorted(range(len(s)), key=lambda i: (s[i].layer, s[i].raw))
        assert order(base) == order(scaled)


class TestHeadScores:
    def test_headroom_and_entropy_fields(self, tiny):
        model, x = tiny
        cap = C.calibrate(model, [(x, [0, 1, 2])])
        for s in C.head_scores(cap, model):
            assert s.entropy == pytest.approx(C.head_entropy(cap, s.layer, s.unit_id))
            assert s.raw == pytest.approx(5 * math.log(5) - s.entropy)
            assert 0.0 <= s.raw <= 5 * math.log(5)


class TestTaylor:
    def test_matches_key_rescaling_fd(self, tiny):
        model, x = tiny
        x, y = x[:1], np.array([1])
        D, step = model.spec.embed_dim, 1e-5
        for layer in range(2):
            for token in range(1, 5):
                def loss(eps):
                    scale = {(layer, token): 1.0 + eps}
                    return ce_sum(straight_line_logits(model.state(), model.spec, x, key_scale=scale), y)

                fd = abs((loss(step) - loss(-step)) / (2 * step)) / D
                got = C.taylor_token_importance(model, x, y, layer, token)
                assert abs(got - fd) <= 1e-3 * max(fd, 1e-8)

    def test_zero_gradient_gives_zero(self, tiny):
        model, x = tiny
        for l in range(2):
            zero_mask_heads(l, [0, 1], model)
        # Without any attention output the keys no longer reach the loss.
        assert all(s.raw == 0.0 for s in C.taylor_token_scores(model, x, np.array([0, 1, 2])))
        assert all(s.raw == 0.0 for s in C.taylor_head_scores(model, x, np.array([0, 1, 2])))

    def test_class_token_protected(self, tiny):
        model, x = tiny
        with pytest.raises(ClassTokenProtectionError):
            C.taylor_token_importance(model, x, np.array([0, 1, 2]), 0, 0)


def test_csv_exports(tiny, tmp_path):
    model, x = tiny
    cap = C.calibrate(model, [(x, [0, 1, 2])])
    C.write_scores_csv(C.head_scores(cap, model), tmp_path / "s.csv")
    C.write_attention_csv(cap, tmp_path / "a.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "kind,layer,unit,raw,weighted" and len(lines) == 5
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "layer,head,row,col,value" and len(lines) == 1 + 2 * 2 * 5 * 5
