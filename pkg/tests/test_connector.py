import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import attention_scalar, groups_by_enumeration, queries_scalar, swiglu_scalar
from tilepool.connector import (
    ConnectorParams,
    GradCheckDims,
    attention_pool,
    attention_weights,
    backward_concat,
    connector_backward,
    connector_forward,
    forward_concat,
    grad_check,
    init_params,
    load_params,
    partition_neighborhoods,
    pool_queries,
    save_params,
    swiglu_project,
)
from tilepool.features import FeatureStack, FormatError
from tilepool.numerics import ShapeError, swish


def _random_stack(crops, grid, d_v, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureStack(rng.standard_normal((crops, 2, grid * grid, d_v)), (-3, -9))


# -- neighbourhoods ---------------------------------------------------------

def test_partition_even_grid():
    nmap = partition_neighborhoods(4, 4)
    assert nmap.n_groups == 4 == 16 // 4
    assert nmap.groups[0] == (0, 1, 4, 5)
    assert nmap.groups[3] == (10, 11, 14, 15)


def test_partition_default_grid_gives_182():
    nmap = partition_neighborhoods(27, 27)
    assert (nmap.pooled_rows, nmap.pooled_cols) == (13, 14)
    assert nmap.n_groups == 182


def test_partition_odd_grid_matches_enumeration():
    nmap = partition_neighborhoods(5, 5)
    assert (nmap.pooled_rows, nmap.pooled_cols) == (2, 3)
    expected = groups_by_enumeration(5, 5)
    assert [list(g) for g in nmap.groups] == expected
    assert sum(len(g) for g in expected) == 25
    assert sorted(len(g) for g in nmap.groups) == [2, 3, 4, 4, 6, 6]


@given(st.integers(1, 31), st.integers(1, 31))
def test_partition_is_a_partition(gh, gw):
    nmap = partition_neighborhoods(gh, gw)
    members = [p for g in nmap.groups for p in g]
    assert sorted(members) == list(range(gh * gw))
    assert nmap.n_groups == nmap.pooled_rows * nmap.pooled_cols
    assert [list(g) for g in nmap.groups] == groups_by_enumeration(gh, gw)
    for gi, g in enumerate(nmap.groups):
        iy, ix = divmod(gi, nmap.pooled_cols)
        interior = 2 * iy + 2 < gh - (gh % 2) and 2 * ix + 1 < gw
        if interior:
            assert g == tuple((2 * iy + dy) * gw + 2 * ix + dx for dy in (0, 1) for dx in (0, 1))


def test_partition_even_grids_quarter_exactly():
    for side in range(2, 30, 2):
        assert partition_neighborhoods(side, side).n_groups == side * side // 4


# -- queries -----------------------------------------------------------------

def test_pool_queries_identical_rows():
    v = np.array([0.3, -1.2, 5.0])
    q = pool_queries(np.tile(v, (4, 1)), partition_neighborhoods(2, 2))
    np.testing.assert_array_equal(q, [v])


def test_pool_queries_arithmetic_mean():
    h = np.array([[0.0, 0.0], [0.0, 2.0], [2.0, 0.0], [2.0, 2.0]])
    assert pool_queries(h, partition_neighborhoods(2, 2)).tolist() == [[1.0, 1.0]]


def test_pool_queries_matches_scalar_oracle(rng):
    h = rng.standard_normal((729, 6))
    nmap = partition_neighborhoods(27, 27)
    expected = queries_scalar(h.tolist(), groups_by_enumeration(27, 27))
    np.testing.assert_allclose(pool_queries(h, nmap), expected, rtol=1e-12, atol=1e-12)


def test_pool_queries_shape_mismatch():
    with pytest.raises(ShapeError):
        pool_queries(np.zeros((10, 2)), partition_neighborhoods(3, 3))


# -- attention pooling --------------------------------------------------------

def test_zero_query_weights_give_uniform_global_attention(rng):
    params = init_params(3, 2, seed=4).replace(w_q=np.zeros((6, 3)))
    h = rng.standard_normal((16, 6))
    nmap = partition_neighborhoods(4, 4)
    q = pool_queries(h, nmap)
    w = attention_weights(h, q, params, nmap, "global")
    np.testing.assert_allclose(w, np.full((4, 16), 1 / 16), rtol=1e-14)
    out = attention_pool(h, q, params, nmap, "global")
    expected = h.mean(axis=0) @ params.w_v @ params.w_o
    np.testing.assert_allclose(out, np.tile(expected, (4, 1)), rtol=1e-12, atol=1e-14)


def test_local_group_of_identical_rows(rng):
    params = init_params(2, 3, seed=9)
    h = rng.standard_normal((16, 4))
    v = rng.standard_normal(4)
    h[[0, 1, 4, 5]] = v
    nmap = partition_neighborhoods(4, 4)
    out = attention_pool(h, pool_queries(h, nmap), params, nmap, "local")
    np.testing.assert_allclose(out[0], v @ params.w_v @ params.w_o, rtol=1e-12)


def test_attention_single_query_hand_evaluation(rng):
    # N = 4, M = 1, d_v = 1: spell every scalar out
    params = init_params(1, 2, seed=3)
    h = rng.standard_normal((4, 2))
    nmap = partition_neighborhoods(2, 2)
    q = h.mean(axis=0)
    wq, wk, wv, wo = params.w_q[:, 0], params.w_k[:, 0], params.w_v, params.w_o[:, 0]
    a = q[0] * wq[0] + q[1] * wq[1]
    scores = [a * (h[j, 0] * wk[0] + h[j, 1] * wk[1]) for j in range(4)]
    z = sum(math.exp(s) for s in scores)
    mixed = [sum(math.exp(scores[j]) / z * (h[j, 0] * wv[0, c] + h[j, 1] * wv[1, c]) for j in range(4))
             for c in range(2)]
    expected = mixed[0] * wo[0] + mixed[1] * wo[1]
    for mode in ("local", "global"):
        out = attention_pool(h, pool_queries(h, nmap), params, nmap, mode)
        assert out.shape == (1, 1)
        assert out[0, 0] == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("mode", ["local", "global"])
@pytest.mark.parametrize("grid, d_v", [((2, 2), 1), ((5, 5), 2), ((6, 6), 4), ((3, 4), 3)])
def test_attention_matches_scalar_oracle(mode, grid, d_v):
    rng = np.random.default_rng(d_v)
    params = init_params(d_v, 2, seed=d_v)
    nmap = partition_neighborhoods(*grid)
    h = rng.standard_normal((nmap.n_patches, 2 * d_v))
    q = pool_queries(h, nmap)
    groups = [list(g) for g in nmap.groups] if mode == "local" else None
    expected = attention_scalar(h.tolist(), q.tolist(), params.w_q.tolist(), params.w_k.tolist(),
                                params.w_v.tolist(), params.w_o.tolist(), groups)
    np.testing.assert_allclose(attention_pool(h, q, params, nmap, mode), expected, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("mode", ["local", "global"])
def test_attention_rows_sum_to_one(mode, rng):
    params = init_params(4, 2, seed=1)
    nmap = partition_neighborhoods(7, 6)
    h = rng.standard_normal((42, 8)) * 10
    w = attention_weights(h, pool_queries(h, nmap), params, nmap, mode)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    if mode == "local":
        assert np.all(w[~nmap.mask()] == 0.0)


def test_local_mode_ignores_out_of_group_patches(rng):
    params = init_params(3, 4, seed=2)
    nmap = partition_neighborhoods(5, 5)
    h = rng.standard_normal((25, 6))
    out = forward_concat([h], params, nmap, "local")[0]
    for g, members in enumerate(nmap.groups):
        outside = [p for p in range(25) if p not in members]
        h2 = h.copy()
        h2[outside] = rng.standard_normal((len(outside), 6)) * 100
        out2 = forward_concat([h2], params, nmap, "local")[0]
        np.testing.assert_array_equal(out2[g], out[g])


def test_local_mode_group_permutation_equivariance(rng):
    params = init_params(2, 3, seed=8)
    nmap = partition_neighborhoods(6, 6)
    h = rng.standard_normal((36, 4))
    a, b = 1, 7
    h2 = h.copy()
    h2[list(nmap.groups[a])] = h[list(nmap.groups[b])]
    h2[list(nmap.groups[b])] = h[list(nmap.groups[a])]
    out = forward_concat([h], params, nmap, "local")[0]
    out2 = forward_concat([h2], params, nmap, "local")[0]
    perm = list(range(nmap.n_groups))
    perm[a], perm[b] = b, a
    np.testing.assert_allclose(out2, out[perm], rtol=1e-12, atol=1e-15)


def test_invalid_mode():
    nmap = partition_neighborhoods(2, 2)
    with pytest.raises(ValueError):
        attention_pool(np.zeros((4, 2)), np.zeros((1, 2)), init_params(1, 1), nmap, "windowed")


# -- SwiGLU -----------------------------------------------------------------------

def test_swiglu_zero_input():
    params = init_params(3, 5, seed=0)
    assert np.array_equal(swiglu_project(np.zeros((4, 3)), params), np.zeros((4, 5)))


def test_swiglu_zero_gate_weights(rng):
    params = init_params(3, 5, seed=0).replace(w_2=np.zeros((3, 15)))
    assert np.array_equal(swiglu_project(rng.standard_normal((4, 3)), params), np.zeros((4, 5)))


def test_swiglu_matches_scalar_oracle(rng):
    params = init_params(4, 3, seed=6)
    hp = rng.standard_normal((9, 4))
    expected = swiglu_scalar(hp.tolist(), params.w_1.tolist(), params.w_2.tolist(), params.w_3.tolist())
    np.testing.assert_allclose(swiglu_project(hp, params), expected, rtol=1e-12, atol=1e-12)


def test_swiglu_shape_mismatch():
    with pytest.raises(ShapeError):
        swiglu_project(np.zeros((2, 3)), init_params(4, 2))


# -- parameters -------------------------------------------------------------------------

def test_param_shapes():
    p = init_params(8, 16)
    assert p.w_q.shape == (16, 8) and p.w_k.shape == (16, 8)
    assert p.w_v.shape == (16, 16) and p.w_o.shape == (16, 8)
    assert p.w_1.shape == (8, 48) and p.w_2.shape == (8, 48) and p.w_3.shape == (48, 16)
    assert p.d_k == p.d_v == 8


def test_param_init_bounds_and_determinism():
    p = init_params(4, 6, seed=11)
    assert p == init_params(4, 6, seed=11)
    assert not p == init_params(4, 6, seed=12)
    for name, m in p.as_dict().items():
        assert np.abs(m).max() <= 1 / math.sqrt(m.shape[0])


def test_param_shape_validation():
    p = init_params(2, 3)
    with pytest.raises(ShapeError):
        p.replace(w_o=np.zeros((4, 3)))


def test_param_container_round_trip():
    p = init_params(3, 5, seed=2)
    raw = save_params(p)
    assert raw[:4] == b"JVP1"
    assert load_params(raw) == p
    with pytest.raises(FormatError, match="JVP1"):
        load_params(b"JVF1" + raw[4:])
    with pytest.raises(FormatError):
        load_params(raw[:-1])


# -- full forward ---------------------------------------------------------------------

def test_forward_default_stack_shapes():
    stack = _random_stack(13, 27, 4)
    outs = connector_forward(stack, init_params(4, 6))
    assert len(outs) == 13
    assert all(o.shape == (182, 6) for o in outs)
    assert sum(o.shape[0] for o in outs) == 2366


def test_forward_even_toy_crop():
    outs = connector_forward(_random_stack(1, 4, 2), init_params(2, 3))
    assert outs[0].shape == (4, 3)


@pytest.mark.parametrize("d_l", [1, 2, 4, 8])
def test_forward_d_l_only_changes_columns(d_l):
    stack = _random_stack(2, 5, 3)
    small = connector_forward(stack, init_params(3, d_l))
    big = connector_forward(stack, init_params(3, 2 * d_l))
    for s, b in zip(small, big):
        assert s.shape[0] == b.shape[0] == 6
        assert (s.shape[1], b.shape[1]) == (d_l, 2 * d_l)


def test_forward_crops_are_independent():
    stack = _random_stack(3, 5, 2, seed=3)
    params = init_params(2, 3)
    outs = connector_forward(stack, params)
    single = FeatureStack(stack.values[1:2], stack.layer_ids)
    np.testing.assert_array_equal(connector_forward(single, params)[0], outs[1])


# -- backward -------------------------------------------------------------------------

def test_backward_zero_upstream():
    stack = _random_stack(2, 5, 3)
    params = init_params(3, 4)
    grads = connector_backward(stack, params, "local", [np.zeros((6, 4))] * 2)
    assert all(not g.any() for g in grads.weights.values())
    assert all(not g.any() for g in grads.inputs)


def test_backward_last_layer_chain_rule(rng):
    stack = _random_stack(1, 4, 2)
    params = init_params(2, 3, seed=5)
    dy = rng.standard_normal((4, 3))
    grads = connector_backward(stack, params, "local", [dy])
    h = np.concatenate([stack.values[0, 0], stack.values[0, 1]], axis=1)
    nmap = partition_neighborhoods(4, 4)
    pooled = attention_pool(h, pool_queries(h, nmap), params, nmap, "local")
    gated = swish(pooled @ params.w_1) * (pooled @ params.w_2)
    np.testing.assert_allclose(grads.weights["w_3"], gated.T @ dy, rtol=1e-12)


def test_backward_shape_errors():
    stack = _random_stack(2, 4, 2)
    params = init_params(2, 3)
    with pytest.raises(ShapeError):
        connector_backward(stack, params, "local", [np.zeros((4, 3))])
    with pytest.raises(ShapeError):
        connector_backward(stack, params, "local", [np.zeros((4, 2))] * 2)


@pytest.mark.parametrize("mode", ["local", "global"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_check_passes(seed, mode):
    report = grad_check(seed, GradCheckDims(), mode=mode)
    assert set(report.errors) == {"W_Q", "W_K", "W_V", "W_O", "W_1", "W_2", "W_3", "H_CONCAT"}
    assert report.passed, report.lines()


def test_grad_check_on_even_grid_single_crop():
    assert grad_check(5, GradCheckDims(d_v=2, d_l=3, grid_h=4, grid_w=4, crops=1)).passed


def test_grad_check_catches_corrupted_gradient():
    def corrupted(*args):
        grads = backward_concat(*args)
        grads.weights["w_k"] = grads.weights["w_k"] * 1.01
        return grads

    report = grad_check(0, GradCheckDims(), backward=corrupted)
    assert not report.passed
    assert report.errors["W_K"] > 1e-4
    assert report.errors["W_Q"] < 1e-4


def test_grad_check_verdicts_are_deterministic():
    a = grad_check(3, GradCheckDims(d_v=2, d_l=2, grid_h=3, grid_w=3, crops=1))
    b = grad_check(3, GradCheckDims(d_v=2, d_l=2, grid_h=3, grid_w=3, crops=1))
    assert a.errors == b.errors and a.passed == b.passed
