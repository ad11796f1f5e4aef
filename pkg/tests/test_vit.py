import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amgprune import checkpoint
from amgprune import tensor as T
from amgprune.errors import (
    CheckpointError,
    ClassTokenProtectionError,
    ContractError,
    DegenerateLayerError,
    DimensionError,
)
from amgprune.tensor import Tensor
from amgprune.vit import (
    AttentionCapture,
    ModelSpec,
    VitModel,
    apply_kv_index,
    forward,
    remove_heads,
    zero_mask_heads,
)

from conftest import images_for, randomized, tiny_spec
from oracles import straight_line_logits


def test_straight_line_oracle(tiny):
    model, x = tiny
    ref = straight_line_logits(model.state(), model.spec, x)
    np.testing.assert_allclose(forward(model, x).data, ref, rtol=0, atol=1e-10)


def test_straight_line_oracle_with_pruned_structure(tiny):
    model, x = tiny
    remove_heads(1, [0], model)
    apply_kv_index(0, [0, 2, 3], model)
    ref = straight_line_logits(model.state(), model.spec, x)
    np.testing.assert_allclose(forward(model, x).data, ref, rtol=0, atol=1e-10)


def test_output_shape(tiny):
    model, x = tiny
    assert forward(model, x).shape == (3, 3)


def test_bad_image_shape():
    model = randomized(tiny_spec())
    with pytest.raises(DimensionError):
        forward(model, np.zeros((2, 1, 5, 5)))


def test_full_range_index_is_bitwise_noop(tiny):
    model, x = tiny
    before = forward(model, x).data.tobytes()
    for l in range(model.spec.layers):
        apply_kv_index(l, range(model.spec.num_tokens), model)
    assert forward(model, x).data.tobytes() == before


def test_zero_query_key_gives_uniform_rows():
    spec = tiny_spec(layers=1, heads=1)
    model = randomized(spec)
    for name in ("blocks.0.attn.wq", "blocks.0.attn.wk"):
        model.params[name] = Tensor(np.zeros(model.params[name].shape), requires_grad=True)
    cap = AttentionCapture()
    forward(model, images_for(spec, 2), capture=cap)
    np.testing.assert_array_equal(cap.attention(0), np.full((1, 5, 5), 0.2))


def test_dropped_token_rows_have_length_and_sum(tiny):
    model, x = tiny
    apply_kv_index(1, [0, 1, 2, 3], model)
    cap = AttentionCapture()
    forward(model, x, capture=cap)
    a = cap.attention(1)
    assert a.shape == (2, 5, 4)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)


def test_duplicate_key_zero_value_token_renormalizes():
    # Three tokens: keys give scores [0, ln2, ln2]; token 2 repeats token 1's key with a zero value.
    q = Tensor([[1.0]])
    k = Tensor([[0.0], [math.log(2)], [math.log(2)]])
    v = Tensor([[3.0], [6.0], [0.0]])

    def attend(keep):
        a = T.softmax(T.matmul(q, T.transpose(T.gather(k, keep, axis=0))))
        return a.data, T.matmul(a, T.gather(v, keep, axis=0)).data

    a_full, o_full = attend([0, 1, 2])
    a_kept, o_kept = attend([0, 1])
    np.testing.assert_allclose(a_full, [[1 / 5, 2 / 5, 2 / 5]], atol=1e-15)
    np.testing.assert_allclose(a_kept, [[1 / 3, 2 / 3]], atol=1e-15)
    # Numerator unchanged, denominator loses exactly the dropped token's weight.
    np.testing.assert_allclose(o_full, [[15 / 5]], atol=1e-14)
    np.testing.assert_allclose(o_kept, [[15 / 3]], atol=1e-14)
    np.testing.assert_allclose(a_kept, a_full[:, :2] / a_full[:, :2].sum(), atol=1e-15)


class TestIndexValidation:
    def test_class_token_protected(self, tiny):
        model, _ = tiny
        with pytest.raises(ClassTokenProtectionError):
            apply_kv_index(0, [1, 2, 3], model)
        assert model.spec.retained_kv_indices[0] is None

    def test_spec_rejects_missing_class_token(self):
        with pytest.raises(ClassTokenProtectionError):
            tiny_spec(retained_kv_indices=[[1, 2], None])

    @pytest.mark.parametrize("idx", [[0, 2, 2], [0, 3, 1], [0, 5], [-1, 0]])
    def test_bad_indices(self, tiny, idx):
        model, _ = tiny
        with pytest.raises(ContractError):
            apply_kv_index(0, idx, model)


class TestRemoveHeads:
    def test_vit_base_param_drop(self):
        spec = ModelSpec.uniform(image_size=32, patch_size=16, embed_dim=768, layers=1, heads=12, head_dim=64)
        model = VitModel.init(spec, seed=0, scheme="vit")
        before = model.msa_param_count()
        remove_heads(0, [5], model)
        assert before - model.msa_param_count() == 4 * 768 * 64 == 196_608

    def test_shapes_and_ids_follow(self, tiny):
        model, _ = tiny
        remove_heads(0, [0], model)
        assert model.spec.heads_per_layer == [1, 2]
        assert model.params["blocks.0.attn.wq"].shape == (8, 4)
        assert model.params["blocks.0.attn.wo"].shape == (4, 8)
        assert model.head_ids == [[1], [0, 1]]

    def test_degenerate_layer(self, tiny):
        model, _ = tiny
        with pytest.raises(DegenerateLayerError):
            remove_heads(0, [0, 1], model)

    def test_out_of_range_head(self, tiny):
        model, _ = tiny
        with pytest.raises(ContractError):
            remove_heads(0, [2], model)

    def test_zero_block_head_removal_leaves_logits(self, tiny):
        model, x = tiny
        zero_mask_heads(1, [1], model)
        before = forward(model, x).data
        remove_heads(1, [1], model)
        np.testing.assert_allclose(forward(model, x).data, before, rtol=0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.data())
def test_surgery_matches_zero_mask(seed, data):
    spec = tiny_spec(layers=3, heads=3)
    model = randomized(spec, seed=seed)
    x = images_for(spec, 2, seed=seed)
    masked = model.clone()
    for l in range(spec.layers):
        drop = data.draw(st.sets(st.integers(0, 2), max_size=2))
        zero_mask_heads(l, drop, masked)
        remove_heads(l, drop, model)
    np.testing.assert_allclose(forward(model, x).data, forward(masked, x).data, rtol=0, atol=1e-10)


def test_captured_rows_are_stochastic_after_pruning(tiny):
    model, x = tiny
    remove_heads(0, [1], model)
    apply_kv_index(0, [0, 4], model)
    apply_kv_index(1, [0, 1, 3], model)
    cap = AttentionCapture()
    forward(model, x, capture=cap)
    for l in range(2):
        np.testing.assert_allclose(cap.attention(l).sum(axis=-1), 1.0, atol=1e-9)


def test_init_is_deterministic_and_starts_uniform():
    spec = tiny_spec()
    a, b = VitModel.init(spec, seed=3), VitModel.init(spec, seed=3)
    assert all(np.array_equal(a.state()[k], b.state()[k]) for k in a.state())
    cap = AttentionCapture()
    forward(a, images_for(spec, 2), capture=cap)
    np.testing.assert_allclose(cap.attention(0), 1 / 5, atol=1e-15)


class TestCheckpoint:
    def test_round_trip(self, tiny, tmp_path):
        model, x = tiny
        remove_heads(0, [1], model)
        apply_kv_index(1, [0, 2, 4], model)
        path = tmp_path / "m.ckpt"
        digest = checkpoint.save(model, path, meta={"note": "x"})
        loaded, meta = checkpoint.load(path)
        assert meta == {"note": "x"}
        assert digest == checkpoint.file_hash(path)
        assert loaded.spec == model.spec and loaded.head_ids == model.head_ids
        assert forward(loaded, x).data.tobytes() == forward(model, x).data.tobytes()

    def test_bytes_deterministic(self, tiny):
        model, _ = tiny
        assert checkpoint.dumps(model) == checkpoint.dumps(model.clone())

    def test_truncated_payload_rejected(self, tiny):
        model, _ = tiny
        with pytest.raises(CheckpointError):
            checkpoint.loads(checkpoint.dumps(model)[:-8])

    def test_garbage_rejected(self):
        with pytest.raises(CheckpointError):
            checkpoint.loads(b"not a checkpoint")
