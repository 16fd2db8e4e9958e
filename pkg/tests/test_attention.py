import math

import numpy as np
import pytest

from reportgen import attention as attn
from reportgen import autodiff as ad
from reportgen.config import derived_rng

D = 5


def make_spatial(seed=0, cond_dim=3, attn_hidden=4):
    store = ad.ParameterStore()
    p = attn.init_spatial_attention(store, "sp", derived_rng(seed, "sp"), D, cond_dim, attn_hidden)
    return store, p


def make_mqa(seed=0, n_queries=4):
    store = ad.ParameterStore()
    p = attn.init_multi_query(store, "mqa", derived_rng(seed, "mqa"), D, n_queries)
    return store, p


def random_queryset(rng, n_keywords=2, m_diseases=2):
    kw = ad.Tensor(rng.normal(size=(n_keywords, D)))
    dz = ad.Tensor(rng.normal(size=(m_diseases, D)))
    return attn.build_query_set(kw, dz, n_keywords, D)


# ---------------------------------------------------------------------------
# spatial attention


def test_identical_cells_give_uniform_weights():
    _, p = make_spatial()
    fmap = ad.Tensor(np.tile(np.linspace(-1, 1, D), (3, 3, 1)))
    out = attn.spatial_scores(fmap, ad.Tensor(np.ones(3)), p)
    assert np.allclose(out.weights.data, 1.0 / 9, atol=1e-12)
    assert abs(out.weights.data.sum() - 1.0) < 1e-12


def test_constant_score_shift_leaves_weights_unchanged():
    rng = np.random.default_rng(1)
    _, p = make_spatial(seed=2)
    fmap = ad.Tensor(rng.normal(size=(2, 2, D)))
    out = attn.spatial_scores(fmap, ad.Tensor(rng.normal(size=3)), p)
    shifted = ad.softmax(ad.reshape(out.scores + ad.Tensor(3.7), (4,)), axis=0)
    assert np.max(np.abs(shifted.data.reshape(2, 2) - out.weights.data)) < 1e-12


def test_spatial_condition_dim_checked():
    _, p = make_spatial(cond_dim=3)
    with pytest.raises(ad.ShapeError):
        attn.spatial_scores(ad.Tensor(np.zeros((2, 2, D))), ad.Tensor(np.zeros(4)), p)


def test_spatial_scores_gradient():
    rng = np.random.default_rng(2)
    store, p = make_spatial(seed=3)
    fmap = ad.Tensor(rng.normal(size=(2, 2, D)))
    cond = ad.Tensor(rng.normal(size=3))
    weights = ad.Tensor(rng.normal(size=(2, 2)))

    def loss():
        return (attn.spatial_scores(fmap, cond, p).weights * weights).sum()

    store.zero_grad()
    ad.backward(loss(), store)
    analytic = {n: t.grad.copy() for n, t in store.items()}
    numeric = ad.finite_diff_gradient(lambda: loss().item(), store)
    assert ad.max_relative_error(analytic, numeric) <= 1e-4


# ---------------------------------------------------------------------------
# attend_spatial


def test_one_hot_weights_select_cell():
    rng = np.random.default_rng(3)
    fmap = rng.normal(size=(3, 3, D))
    w = np.zeros((3, 3))
    w[1, 2] = 1.0
    out = attn.attend_spatial(ad.Tensor(fmap), ad.Tensor(w))
    assert np.allclose(out.data, fmap[1, 2], atol=1e-15)


def test_constant_map_ignores_weights():
    rng = np.random.default_rng(4)
    fmap = np.tile(rng.normal(size=D), (3, 3, 1))
    w = rng.dirichlet(np.ones(9)).reshape(3, 3)
    out = attn.attend_spatial(ad.Tensor(fmap), ad.Tensor(w))
    assert np.max(np.abs(out.data - fmap[0, 0])) < 1e-12


def test_attend_matches_double_loop_oracle():
    rng = np.random.default_rng(5)
    fmap = rng.normal(size=(4, 4, D))
    w = rng.dirichlet(np.ones(16)).reshape(4, 4)
    got = attn.attend_spatial(ad.Tensor(fmap), ad.Tensor(w)).data
    want = np.zeros(D)
    for x in range(4):
        for y in range(4):
            want += w[x, y] * fmap[x, y]
    assert np.max(np.abs(got - want)) < 1e-12


def test_attend_is_linear_in_map():
    rng = np.random.default_rng(6)
    w = ad.Tensor(rng.dirichlet(np.ones(4)).reshape(2, 2))
    a = rng.normal(size=(2, 2, D))
    b = rng.normal(size=(2, 2, D))
    lhs = attn.attend_spatial(ad.Tensor(a + 2.5 * b), w).data
    rhs = attn.attend_spatial(ad.Tensor(a), w).data + 2.5 * attn.attend_spatial(ad.Tensor(b), w).data
    assert np.max(np.abs(lhs - rhs)) < 1e-12


# ---------------------------------------------------------------------------
# fuse_views


def test_fuse_single_view_identity():
    v = ad.Tensor(np.arange(1.0, D + 1))
    out = attn.fuse_views([v], ad.Tensor(np.eye(D)))
    assert np.array_equal(out.data, v.data)


def test_fuse_zero_inputs():
    rng = np.random.default_rng(7)
    w = ad.Tensor(rng.normal(size=(2 * D, D)))
    out = attn.fuse_views([ad.Tensor(np.zeros(D)), ad.Tensor(np.zeros(D))], w)
    assert np.array_equal(out.data, np.zeros(D))


def test_fuse_wrong_count():
    w = ad.Tensor(np.zeros((2 * D, D)))
    with pytest.raises(ad.ValidationError):
        attn.fuse_views([ad.Tensor(np.zeros(D))], w)


def test_fuse_gradient():
    rng = np.random.default_rng(8)
    store = ad.ParameterStore()
    w = store.add("w_fuse", ad.uniform_init(rng, (2 * D, D), 2 * D))
    a = ad.Tensor(rng.normal(size=D))
    b = ad.Tensor(rng.normal(size=D))
    probe = ad.Tensor(rng.normal(size=D))

    def loss():
        return (attn.fuse_views([a, b], w) * probe).sum()

    store.zero_grad()
    ad.backward(loss(), store)
    analytic = {n: t.grad.copy() for n, t in store.items()}
    numeric = ad.finite_diff_gradient(lambda: loss().item(), store)
    assert ad.max_relative_error(analytic, numeric) <= 1e-4


# ---------------------------------------------------------------------------
# multi-query attention


def test_single_value_every_query_gets_projected_value():
    rng = np.random.default_rng(9)
    _, p = make_mqa(seed=4)
    qs = random_queryset(rng)
    value = ad.Tensor(rng.normal(size=D))
    anchor = ad.Tensor(rng.normal(size=D))
    out, weights = attn.multi_query_attention(qs, anchor, [value], p, return_weights=True)
    assert np.allclose(weights, 1.0, atol=0)
    v_proj = value.data @ p.w_value.data
    want = np.tile(v_proj, 4) @ p.w_out.data.T
    assert np.max(np.abs(out.data - want)) < 1e-12


def test_zero_queries_give_uniform_mean_of_values():
    rng = np.random.default_rng(10)
    _, p = make_mqa(seed=5)
    qs = attn.build_query_set(None, ad.Tensor(np.zeros((2, D))), 2, D)
    values = [ad.Tensor(rng.normal(size=D)) for _ in range(3)]
    anchor = ad.Tensor(rng.normal(size=D))
    out, weights = attn.multi_query_attention(qs, anchor, values, p, return_weights=True)
    assert np.allclose(weights, 1.0 / 3, atol=1e-12)
    mean_proj = np.mean([v.data @ p.w_value.data for v in values], axis=0)
    want = np.tile(mean_proj, 4) @ p.w_out.data.T
    assert np.max(np.abs(out.data - want)) < 1e-10


def test_mqa_matches_direct_formula_oracle():
    rng = np.random.default_rng(11)
    store, p = make_mqa(seed=6)
    kw = ad.Tensor(rng.normal(size=(2, D)))
    dz = ad.Tensor(rng.normal(size=(2, D)))
    qs = attn.build_query_set(kw, dz, 2, D)
    values = [ad.Tensor(rng.normal(size=D)) for _ in range(3)]
    anchor = ad.Tensor(rng.normal(size=D))
    got = attn.multi_query_attention(qs, anchor, values, p).data

    q = np.vstack([kw.data, dz.data])
    keys = np.stack([(v.data + anchor.data) @ p.w_key.data for v in values])
    proj = np.stack([v.data @ p.w_value.data for v in values])
    attended = []
    for i in range(4):
        logits = keys @ q[i] / math.sqrt(D)
        e = np.exp(logits - logits.max())
        w = e / e.sum()
        attended.append(w @ proj)
    want = np.concatenate(attended) @ p.w_out.data.T
    assert np.max(np.abs(got - want)) < 1e-10


def test_mqa_empty_values_rejected():
    rng = np.random.default_rng(12)
    _, p = make_mqa(seed=7)
    qs = random_queryset(rng)
    with pytest.raises(ad.ValidationError):
        attn.multi_query_attention(qs, ad.Tensor(np.zeros(D)), [], p)


def test_mqa_weights_normalized_and_permutation_stable():
    rng = np.random.default_rng(13)
    _, p = make_mqa(seed=8)
    qs = random_queryset(rng)
    values = [ad.Tensor(rng.normal(size=D)) for _ in range(4)]
    anchor = ad.Tensor(rng.normal(size=D))
    out1, w1 = attn.multi_query_attention(qs, anchor, values, p, return_weights=True)
    assert np.max(np.abs(w1.sum(axis=1) - 1.0)) < 1e-12
    perm = [2, 0, 3, 1]
    out2, w2 = attn.multi_query_attention(qs, anchor, [values[i] for i in perm], p, return_weights=True)
    assert np.max(np.abs(out1.data - out2.data)) < 1e-12
    assert np.max(np.abs(w1[:, perm] - w2)) < 1e-12


def test_mqa_logit_shift_invariance():
    # an anchor change adds the same constant to every logit of a given
    # query, so weights and output are invariant to it (softmax shift)
    rng = np.random.default_rng(14)
    _, p = make_mqa(seed=9)
    qs = random_queryset(rng)
    values = [ad.Tensor(rng.normal(size=D)) for _ in range(3)]
    out1, w1 = attn.multi_query_attention(qs, ad.Tensor(np.zeros(D)), values, p, return_weights=True)
    out2, w2 = attn.multi_query_attention(
        qs, ad.Tensor(rng.normal(size=D) * 3), values, p, return_weights=True
    )
    assert np.max(np.abs(w1 - w2)) < 1e-10
    assert np.max(np.abs(out1.data - out2.data)) < 1e-10


def test_mqa_gradient_through_everything():
    rng = np.random.default_rng(15)
    store, p = make_mqa(seed=10)
    kw = store.add("queries.kw", rng.normal(size=(2, D)))
    dz = store.add("queries.dz", rng.normal(size=(2, D)))
    anchor = ad.Tensor(rng.normal(size=D))
    raw_values = [rng.normal(size=D) for _ in range(3)]
    probe = ad.Tensor(rng.normal(size=D))

    def loss():
        qs = attn.build_query_set(kw, dz, 2, D)
        values = [ad.Tensor(v) for v in raw_values]
        return (attn.multi_query_attention(qs, anchor, values, p) * probe).sum()

    store.zero_grad()
    ad.backward(loss(), store)
    analytic = {n: t.grad.copy() for n, t in store.items()}
    numeric = ad.finite_diff_gradient(lambda: loss().item(), store)
    assert ad.max_relative_error(analytic, numeric) <= 1e-4


def test_query_set_padding_and_size():
    rng = np.random.default_rng(16)
    kw = ad.Tensor(rng.normal(size=(1, D)))
    dz = ad.Tensor(rng.normal(size=(2, D)))
    qs = attn.build_query_set(kw, dz, 3, D)
    assert qs.matrix.shape == (5, D)
    assert np.array_equal(qs.matrix.data[1:3], np.zeros((2, D)))
    with pytest.raises(ad.ValidationError):
        attn.build_query_set(ad.Tensor(rng.normal(size=(4, D))), dz, 3, D)
