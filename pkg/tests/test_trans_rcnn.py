import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tinydet import tensor as T
from tinydet.errors import NumericError, ShapeError
from tinydet.tensor import Tensor
from tinydet.training import cross_entropy
from tinydet.trans_rcnn import (HeadParams, MTEParams, assemble_local_sequence, attention_scores, decode_deltas,
                                encode_deltas, heads_forward, mte_forward, pooling_weights, task_mask,
                                task_token_select, ungrouped_weights)

from oracles import dense_mte


def _params(rng, dim=8, layers=2, heads=2):
    return MTEParams.init(dim, rng, layers, heads)


# sequence assembly

def test_assemble_length_and_order(rng):
    u = rng.normal(size=(16, 8))
    t_cls, t_box = rng.normal(size=8), rng.normal(size=8)
    seq = assemble_local_sequence(u, t_cls, t_box).data
    assert seq.shape == (18, 8)
    np.testing.assert_array_equal(seq[0], t_cls)
    np.testing.assert_array_equal(seq[-1], t_box)
    for i in range(16):
        np.testing.assert_array_equal(seq[i + 1], u[i])


def test_assemble_batched(rng):
    u = rng.normal(size=(3, 5, 4))
    seq = assemble_local_sequence(u, np.ones(4), np.zeros(4)).data
    assert seq.shape == (3, 7, 4) and (seq[:, 0] == 1).all() and (seq[:, -1] == 0).all()


def test_assemble_rejects_empty_and_mismatch():
    with pytest.raises(ShapeError):
        assemble_local_sequence(np.zeros((0, 4)), np.zeros(4), np.zeros(4))
    with pytest.raises(ShapeError):
        assemble_local_sequence(np.zeros((2, 4)), np.zeros(3), np.zeros(4))


# mask and attention

def test_task_mask_layout():
    m = task_mask(4)
    assert m.shape == (6, 6) and m.sum() == 2 and m[0, 5] and m[5, 0]


@given(st.integers(0, 2 ** 31), st.integers(1, 12))
def test_mask_zero_and_rows_normalized(seed, n_u):
    rng = np.random.default_rng(seed)
    params = _params(rng)
    out = mte_forward(rng.normal(size=(2, n_u + 2, 8)) * 3, params)
    for w in out.attention:
        assert (w[..., 0, -1] == 0).all() and (w[..., -1, 0] == 0).all()
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_zero_query_key_is_uniform(rng):
    params = _params(rng, layers=1)
    layer = params.layers[0]
    for name in ("wq", "bq", "wk", "bk"):
        setattr(layer, name, Tensor(np.zeros(getattr(layer, name).shape)))
    n_u = 6
    w = mte_forward(rng.normal(size=(n_u + 2, 8)), params).attention[0]
    np.testing.assert_allclose(w[:, 0, :-1], 1.0 / (n_u + 1), atol=1e-15)
    np.testing.assert_allclose(w[:, 1, :], 1.0 / (n_u + 2), atol=1e-15)


@pytest.mark.parametrize("heads", [1, 2])
def test_matches_dense_oracle(rng, heads):
    params = _params(rng, dim=8, layers=2, heads=heads)
    x = rng.normal(size=(7, 8))
    out = mte_forward(x, params)
    tokens, attn = dense_mte(x, params, task_mask(5))
    np.testing.assert_allclose(out.tokens.data, tokens, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(out.attention[-1], attn, rtol=1e-10, atol=1e-14)


def test_batched_matches_single(rng):
    params = _params(rng)
    x = rng.normal(size=(3, 6, 8))
    both = mte_forward(x, params).tokens.data
    for i in range(3):
        np.testing.assert_allclose(both[i], mte_forward(x[i], params).tokens.data, rtol=1e-12, atol=1e-13)


def test_mte_rejects_bad_input(rng):
    params = _params(rng)
    with pytest.raises(ShapeError):
        mte_forward(np.zeros((5, 8)), params, task_mask(4))
    with pytest.raises(ShapeError):
        mte_forward(np.zeros((5, 6)), params)
    with pytest.raises(NumericError):
        mte_forward(np.full((5, 8), np.nan), params)


def test_heads_must_divide_dim(rng):
    with pytest.raises(ShapeError):
        MTEParams.init(10, rng, 1, 4)


# attention scores

def test_scores_uniform_for_identical_keys(rng):
    params = _params(rng, layers=1)
    x = np.tile(rng.normal(size=8), (7, 1))
    a_cls, a_box = attention_scores(mte_forward(x, params).attention[-1])
    np.testing.assert_allclose(a_cls, 1 / 5, atol=1e-12)
    np.testing.assert_allclose(a_box, 1 / 5, atol=1e-12)


def test_scores_recomputed_from_queries_and_keys(rng):
    params = _params(rng, layers=2, heads=2)
    x = rng.normal(size=(9, 8))
    out = mte_forward(x, params)
    a_cls, a_box = attention_scores(out.attention[-1])
    np.testing.assert_allclose(a_cls.sum(), 1.0, atol=1e-12)
    np.testing.assert_allclose(a_box.sum(), 1.0, atol=1e-12)
    h = out.layer_inputs[-1]
    last = params.layers[-1]
    q = h @ last.wq.data + last.bq.data
    k = h @ last.wk.data + last.bk.data
    dk = params.d_k
    want_cls, want_box = np.zeros(7), np.zeros(7)
    for hd in range(params.heads):
        sl = slice(hd * dk, (hd + 1) * dk)
        for row, acc in ((0, want_cls), (-1, want_box)):
            logits = k[1:-1, sl] @ q[row, sl] / np.sqrt(dk)
            e = np.exp(logits - logits.max())
            acc += e / e.sum() / params.heads
    np.testing.assert_allclose(a_cls, want_cls, rtol=1e-11)
    np.testing.assert_allclose(a_box, want_box, rtol=1e-11)


# heads

def _head(rng, dim=8, classes=3):
    return HeadParams.init(dim, classes, rng)


def test_zero_weights_give_bias(rng):
    hp = _head(rng)
    hp.cls_w = Tensor(np.zeros(hp.cls_w.shape))
    hp.cls_b = Tensor(np.array([0.1, -0.2, 0.3, 0.0]))
    logits, _ = heads_forward(rng.normal(size=(6, 8)), ungrouped_weights(6), hp)
    np.testing.assert_array_equal(logits.data, hp.cls_b.data)


def test_pooling_permutation_invariant(rng):
    hp = _head(rng)
    tokens = rng.normal(size=(6, 8))
    g = task_token_select(*rng.dirichlet(np.ones(4), 2))
    w = pooling_weights(g, 6)
    base = heads_forward(tokens, w, hp)
    # swap two class-group members (rows and their weights move together)
    members = [p for p in g.cls_positions]
    if len(members) >= 2:
        i, j = members[0], members[1]
        perm = np.arange(6)
        perm[[i, j]] = perm[[j, i]]
        swapped = heads_forward(tokens[perm], w[:, perm], hp)
        np.testing.assert_allclose(swapped[0].data, base[0].data, rtol=1e-13)


def test_heads_mean_then_matmul(rng):
    hp = _head(rng)
    tokens = rng.normal(size=(7, 8))
    g = task_token_select(*rng.dirichlet(np.ones(5), 2), tokens)
    logits, deltas = heads_forward(tokens, pooling_weights(g, 7), hp)
    np.testing.assert_allclose(logits.data, g.cls_tokens.mean(axis=0) @ hp.cls_w.data + hp.cls_b.data, rtol=1e-12)
    np.testing.assert_allclose(deltas.data, g.box_tokens.mean(axis=0) @ hp.box_w.data + hp.box_b.data, rtol=1e-12)


def test_end_to_end_ce_gradient_with_fixed_routing(rng):
    params = _params(rng, layers=2, heads=2)
    hp = _head(rng)
    x0 = rng.uniform(-3, 3, (8, 8))
    out = mte_forward(x0, params)
    weights = pooling_weights(task_token_select(*attention_scores(out.attention[-1])), 8)

    def loss(x):
        logits, _ = heads_forward(mte_forward(x, params).tokens, weights, hp)
        return cross_entropy(logits, 2)

    analytic = T.vjp(loss, x0).gradient_fn(np.array(1.0))[0]
    numeric = T.finite_diff_grad(lambda v: loss(v).item(), x0)
    assert T.relative_error(analytic, numeric) < 1e-4


# box deltas

def test_deltas_zero_for_identical_boxes():
    b = np.array([[2.0, 3.0, 9.0, 7.0]])
    assert not encode_deltas(b, b).any()


@given(st.integers(0, 2 ** 31))
def test_delta_round_trip(seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 50, (5, 2))
    p = np.concatenate([xy, xy + rng.uniform(1, 12, (5, 2))], axis=1)
    gxy = xy + rng.normal(0, 1, (5, 2))
    g = np.concatenate([gxy, gxy + rng.uniform(1, 12, (5, 2))], axis=1)
    np.testing.assert_allclose(decode_deltas(p, encode_deltas(p, g), max_ratio=1e6), g, rtol=1e-9, atol=1e-9)
