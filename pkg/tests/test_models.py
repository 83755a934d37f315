import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grouprec.models import (BaseModel, GroupHead, GroupModel, GroupSizeError, HeadInput,
                             ipa_predict, moavg_predict, multihot_encode, predict_group,
                             predict_individual)
from grouprec.numkit import Activation, ConfigurationError, DenseLayer, grad_check
from conftest import to_float64
from gradtools import base_prediction_grads, group_prediction_grads

U, I, K = 50, 40, 8


def make_base(kind, seed=0, scale=1.0):
    base = BaseModel.init(kind, U, I, K, seed=seed)
    rng = np.random.default_rng(seed + 100)
    base.user_embeddings[:] = rng.normal(0, scale, size=(U, K))
    base.item_embeddings[:] = rng.normal(0, scale, size=(I, K))
    return base


def make_group_model(kind, size=3, seed=0, mode=HeadInput.EMBEDDING):
    base = make_base(kind, seed)
    base.freeze()
    head = GroupHead.init(U, (16, 12, K), seed=seed, input_mode=mode, latent_dim=K)
    return GroupModel(base, head, size)


def test_multihot_ones():
    assert multihot_encode([0, 2], 4).tolist() == [1, 0, 1, 0]


def test_multihot_singleton():
    assert multihot_encode([3], 4).tolist() == [0, 0, 0, 1]


def test_multihot_uniform():
    assert multihot_encode([0, 1], 2, "uniform").tolist() == [0.5, 0.5]


def test_multihot_out_of_range():
    with pytest.raises(IndexError):
        multihot_encode([4], 4)


def test_gmf_dot_product():
    base = BaseModel.init("gmf", 3, 3, K)
    base.user_embeddings[:] = 0
    base.item_embeddings[:] = 0
    base.user_embeddings[1, 0] = 1
    base.item_embeddings[2, 0] = 3
    assert predict_individual(base, 1, 2) == 3.0


def test_gmf_zero_item():
    base = make_base("gmf")
    base.item_embeddings[5] = 0
    assert all(predict_individual(base, u, 5) == 0.0 for u in range(U))


def test_out_of_range_user():
    with pytest.raises(IndexError):
        predict_individual(make_base("gmf"), U, 0)


def test_mlp_matches_composed_matvec():
    base = make_base("mlp", seed=4)
    u, i = 7, 13
    x = np.concatenate([base.user_embeddings[u], base.item_embeddings[i]]).astype(np.float64)
    for layer in base.tower:
        y = np.array([sum(x[a] * float(layer.weights[a, b]) for a in range(layer.in_dim)) + float(layer.bias[b])
                      for b in range(layer.out_dim)])
        x = np.maximum(y, 0) if layer.activation is Activation.RELU else y
    assert abs(predict_individual(base, u, i) - x[0]) < 1e-5


def test_mlp_tower_shape_enforced():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigurationError):
        BaseModel("mlp", np.zeros((2, K), np.float32), np.zeros((2, K), np.float32),
                  [DenseLayer.init(rng, 2 * K, 4), DenseLayer.init(rng, 4, 1, "relu")])


@pytest.mark.parametrize("mode", list(HeadInput))
@pytest.mark.parametrize("kind", ["gmf", "mlp"])
def test_head_reproducing_user_embedding_matches_individual(kind, mode):
    base = make_base(kind)
    u = 9
    if mode is HeadInput.MULTIHOT:
        w = np.zeros((U, K), np.float32)
        w[u] = base.user_embeddings[u]
        layers = [DenseLayer(w, np.zeros(K, np.float32), "linear")]
    else:
        layers = [DenseLayer(np.eye(K, dtype=np.float32), np.zeros(K, np.float32), "linear")]
    model = GroupModel(base, GroupHead(layers, U, mode), 1)
    for i in range(I):
        assert predict_group(model, [u], i) == pytest.approx(predict_individual(base, u, i), abs=1e-12)


@pytest.mark.parametrize("mode", list(HeadInput))
def test_zero_head_predicts_zero(mode):
    model = make_group_model("gmf", mode=mode)
    for layer in model.head.layers:
        layer.weights[:] = 0
        layer.bias[:] = 0
    for members, i in [((0, 1, 2), 0), ((5, 9, 49), 39)]:
        assert predict_group(model, members, i) == 0.0


@pytest.mark.parametrize("mode", list(HeadInput))
def test_ggmf_matches_head_matvec_oracle(mode):
    model = make_group_model("gmf", seed=2, mode=mode)
    members, item = [3, 17, 40], 11
    x = multihot_encode(members, U)
    if mode is HeadInput.EMBEDDING:
        x = x @ model.base.user_embeddings.astype(np.float64)
    for layer in model.head.layers:
        y = x @ layer.weights.astype(np.float64) + layer.bias
        x = np.maximum(y, 0) if layer.activation is Activation.RELU else y
    oracle = float(x @ model.base.item_embeddings[item].astype(np.float64))
    assert abs(predict_group(model, members, item) - oracle) < 1e-5


@pytest.mark.parametrize("mode", list(HeadInput))
def test_sparse_and_dense_head_paths_agree(mode):
    model = make_group_model("mlp", size=4, seed=5, mode=mode)
    rng = np.random.default_rng(0)
    members = np.array([rng.choice(U, 4, replace=False) for _ in range(20)])
    dense = np.stack([multihot_encode(m, U) for m in members])
    np.testing.assert_array_equal(
        model.head.forward_members(members, model.base.user_embeddings),
        model.head.forward_dense(dense, model.base.user_embeddings))


def test_wrong_group_size():
    model = make_group_model("gmf", size=3)
    with pytest.raises(GroupSizeError):
        predict_group(model, [1, 2], 0)
    model.allow_size_mismatch = True
    predict_group(model, [1, 2], 0)


def test_head_output_must_match_k():
    base = make_base("gmf")
    with pytest.raises(ConfigurationError, match="K 8"):
        GroupModel(base, GroupHead.init(U, (16, 7), latent_dim=K), 2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, U - 1), min_size=2, max_size=6, unique=True), st.integers(0, I - 1),
       st.sampled_from(list(HeadInput)), st.sampled_from(["gmf", "mlp"]))
def test_group_prediction_permutation_invariant(members, item, mode, kind):
    model = make_group_model(kind, size=len(members), mode=mode)
    ref = predict_group(model, members, item)
    for perm in itertools.islice(itertools.permutations(members), 6):
        assert predict_group(model, list(perm), item) == ref


@pytest.mark.parametrize("alpha", [0.5, -2.0, 3.0])
def test_ggmf_linear_in_item_embedding(alpha):
    model = make_group_model("gmf", seed=3)
    to_float64(model.base, model.head)
    members, item = [1, 2, 3], 7
    ref = predict_group(model, members, item)
    model.base.item_embeddings[item] *= alpha
    assert predict_group(model, members, item) == pytest.approx(alpha * ref, rel=1e-12)


@pytest.mark.parametrize("kind", ["gmf", "mlp"])
def test_singletons_equal_individual_exactly(kind):
    base = make_base(kind, seed=6)
    for u, i in [(0, 0), (12, 30), (49, 39)]:
        ind = predict_individual(base, u, i)
        assert ipa_predict(base, [u], i) == ind
        assert moavg_predict(base, [u], i) == ind


def test_ipa_two_members():
    base = BaseModel.init("gmf", 2, 1, K)
    base.user_embeddings[:] = 0
    base.item_embeddings[:] = 0
    base.item_embeddings[0, 0] = 1
    base.user_embeddings[0, 0] = 2
    base.user_embeddings[1, 0] = 4
    assert ipa_predict(base, [0, 1], 0) == 3.0


@pytest.mark.parametrize("kind", ["gmf", "mlp"])
def test_ipa_group_of_seven_loop_oracle(kind):
    base = make_base(kind, seed=8)
    members, item = [1, 4, 9, 16, 25, 36, 49], 3
    total = 0.0
    for u in members:
        total += predict_individual(base, u, item)
    assert abs(ipa_predict(base, members, item) - total / 7) < 1e-9


def test_moavg_row_mean():
    base = make_base("gmf", seed=9)
    a, b = 4, 31
    mean = [(float(base.user_embeddings[a, k]) + float(base.user_embeddings[b, k])) / 2 for k in range(K)]
    vec = base.user_embeddings[[a, b]].astype(np.float64).mean(axis=0)
    assert vec.tolist() == mean
    expected = float(np.dot(mean, base.item_embeddings[7].astype(np.float64)))
    assert moavg_predict(base, [a, b], 7) == pytest.approx(expected, abs=1e-12)


def test_moavg_cancellation():
    base = make_base("gmf", seed=10)
    base.user_embeddings[1] = -base.user_embeddings[0]
    assert all(moavg_predict(base, [0, 1], i) == 0.0 for i in range(I))


def test_multihot_through_linear_is_row_sum():
    base = make_base("gmf", seed=11)
    rng = np.random.default_rng(1)
    p = base.user_embeddings.astype(np.float64)
    for _ in range(50):
        members = rng.choice(U, rng.integers(1, 10), replace=False)
        dense = multihot_encode(members, U) @ p
        rows = p[np.sort(members)].sum(axis=0)
        np.testing.assert_array_equal(dense, rows)


@pytest.mark.parametrize("kind", ["gmf", "mlp"])
def test_base_gradients_finite_difference(kind):
    (base,) = to_float64(make_base(kind, seed=12, scale=0.5))
    params = base.params()
    for user, item in [(3, 5), (44, 21)]:
        grads = base_prediction_grads(base, user, item)
        err = grad_check(lambda: float(base.predict(np.array([user]), np.array([item]))[0]),
                         params, grads, samples=100, seed=user)
        assert err < 1e-3
        # the embedding rows that matter are always checked
        sub = grad_check(lambda: float(base.predict(np.array([user]), np.array([item]))[0]),
                         [params[0][user], params[1][item]], [grads[0][user], grads[1][item]])
        assert sub < 1e-3


@pytest.mark.parametrize("mode", list(HeadInput))
@pytest.mark.parametrize("kind", ["gmf", "mlp"])
def test_group_gradients_finite_difference(kind, mode):
    model = make_group_model(kind, size=3, seed=13, mode=mode)
    to_float64(model.head)
    members, item = [2, 19, 33], 8
    grads = group_prediction_grads(model, members, item)
    f = lambda: predict_group(model, members, item)
    assert grad_check(f, model.head.params(), grads, samples=100, seed=1) < 1e-3
    if mode is HeadInput.MULTIHOT:
        rows = [model.head.layers[0].weights[u] for u in members]
        assert grad_check(f, rows, [grads[0][u] for u in members]) < 1e-3


def test_frozen_base_rejects_writes():
    base = make_base("gmf")
    base.freeze()
    with pytest.raises(ValueError):
        base.user_embeddings[0, 0] = 1.0
