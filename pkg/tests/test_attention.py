import numpy as np
import pytest

from streamattn import oracles
from streamattn import tensor as T
from streamattn.attention import (AttentionBlock, AttentionBlockConfig, MaskError, PairCounter,
                                  attention_block, build_chunk_mask)

D = 16


def _block(name="b", seed=0, **kw):
    return AttentionBlock(name, AttentionBlockConfig(D, **kw), T.Rng(seed))


def _randomise(block, seed):
    """Replace the identity-ish norm parameters so the oracle sees every weight."""
    rng = T.Rng(seed)
    for k, p in block.params.items():
        p.data = np.array(p.data + rng.normal(p.shape, 0.1))
    return block


def _with(block, **arrays):
    for k, v in arrays.items():
        block.params[k].data = np.asarray(v, dtype=np.float64)
    return block


def test_zero_value_path_is_residual():
    b = _with(_block(), wv=np.zeros((D, D)), **{"mlp.w2": np.zeros((4 * D, D))})
    x = T.Rng(1).normal((6, D))
    assert np.array_equal(attention_block(b, T.tensor(x)).data, x)


def test_identical_keys_get_equal_weights():
    b = _with(_block(), wv=np.eye(D), **{"mlp.w2": np.zeros((4 * D, D))})
    q = T.tensor(np.zeros((1, D)))
    key = T.Rng(2).normal((1, D))
    dump = []
    out = attention_block(b, q, T.tensor(np.vstack([key, key])), dump=dump)
    assert np.array_equal(dump[0][1], [[0.5, 0.5]])
    normed = oracles.layer_norm(key, np.ones(D), np.zeros(D))
    assert np.allclose(out.data, normed, rtol=0, atol=1e-12)


def test_chunk_mask_examples():
    assert build_chunk_mask([0] * 5, [0] * 5).admissible().all()
    adm = build_chunk_mask([0, 0, 1, 1], [0, 0, 1, 1]).admissible()
    want = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1]], dtype=bool)
    assert np.array_equal(adm, want)


def test_causal_block_matches_pair_loop_small():
    b = _randomise(_block(causal=True), 3)
    x = T.Rng(4).normal((6, D))
    chunks = np.repeat([0, 1], 3)
    got = attention_block(b, T.tensor(x), mask=build_chunk_mask(chunks, chunks)).data
    want = oracles.attention_block(oracles.block_params(b), x,
                                   admissible=oracles.chunk_admissible(chunks, chunks))
    assert np.max(np.abs(got - want)) < 1e-12


@pytest.mark.parametrize("n_chunks,n_tok", [(1, 17), (2, 9), (4, 9), (4, 17)])
def test_causal_block_matches_pair_loop(n_chunks, n_tok):
    b = _randomise(_block(causal=True), n_chunks)
    x = T.Rng(n_tok).normal((n_chunks * n_tok, D))
    chunks = np.repeat(np.arange(n_chunks) + 7, n_tok)
    got = attention_block(b, T.tensor(x), mask=build_chunk_mask(chunks, chunks)).data
    want = oracles.attention_block(oracles.block_params(b), x,
                                   admissible=oracles.chunk_admissible(chunks, chunks))
    assert np.max(np.abs(got - want)) < 1e-12


def test_spatial_block_matches_pair_loop():
    b = _randomise(_block(), 5)
    x = T.Rng(6).normal((17, D))
    got = attention_block(b, T.tensor(x)).data
    assert np.max(np.abs(got - oracles.attention_block(oracles.block_params(b), x))) < 1e-12


@pytest.mark.parametrize("strides", [(2, 2, 2), (2, 1, 1), (1, 2, 2), (4, 1, 1)])
def test_strided_block_matches_pair_loop(strides):
    b = _randomise(_block(q_strides=strides, kv_strides=strides), 7)
    grid = (4, 4, 4)
    x = T.Rng(8).normal((64, D))
    got = attention_block(b, T.tensor(x), q_grid=grid).data
    want = oracles.attention_block(oracles.block_params(b), x, q_grid=grid,
                                   q_strides=strides, kv_strides=strides)
    assert got.shape == want.shape
    assert np.max(np.abs(got - want)) < 1e-12


def test_cross_attention_block_matches_pair_loop():
    b = _randomise(_block(), 9)
    x = T.Rng(10).normal((4 * 17, D))
    memory = T.Rng(11).normal((8, D))
    got = attention_block(b, T.tensor(x), T.tensor(memory)).data
    want = oracles.attention_block(oracles.block_params(b), x, memory)
    assert np.max(np.abs(got - want)) < 1e-12


def test_self_attention_fusion_matches_pair_loop():
    b = _randomise(_block(causal=True), 12)
    x = T.Rng(13).normal((4 * 17, D))
    memory = T.Rng(14).normal((8, D))
    q_chunks = np.repeat(np.arange(4), 17)
    k_chunks = np.concatenate([np.full(8, -1), q_chunks])
    kv = np.vstack([memory, x])
    got = attention_block(b, T.tensor(x), T.tensor(kv), mask=build_chunk_mask(q_chunks, k_chunks)).data
    want = oracles.attention_block(oracles.block_params(b), x, kv,
                                   oracles.chunk_admissible(q_chunks, k_chunks))
    assert np.max(np.abs(got - want)) < 1e-12


def test_future_chunk_perturbation_leaves_past_unchanged():
    b = _randomise(_block(causal=True), 15)
    rng = T.Rng(16)
    chunks = np.repeat([0, 1, 2], 5)
    mask = build_chunk_mask(chunks, chunks)
    x = rng.normal((15, D))
    base = attention_block(b, T.tensor(x), mask=mask).data
    for _ in range(20):
        y = x.copy()
        y[5:10] += rng.normal((5, D))
        out = attention_block(b, T.tensor(y), mask=mask).data
        assert np.array_equal(out[:5], base[:5])
        assert not np.array_equal(out[5:], base[5:])


def test_masked_pairs_have_zero_gradient():
    b = _randomise(_block(causal=True), 17)
    chunks = np.repeat([0, 1], 4)
    x = T.parameter(T.Rng(18).normal((8, D)))
    out = attention_block(b, x, mask=build_chunk_mask(chunks, chunks))
    T.backward(T.sum_all(T.take_rows(out, slice(0, 4))))
    assert not np.any(x.grad[4:])
    assert np.any(x.grad[:4])


def test_permutation_equivariance_within_chunk():
    b = _randomise(_block(causal=True), 19)
    rng = T.Rng(20)
    chunks = np.repeat([0, 1], 6)
    mask = build_chunk_mask(chunks, chunks)
    x = rng.normal((12, D))
    perm = np.concatenate([np.arange(6), 6 + np.array([3, 0, 5, 1, 4, 2])])
    a = attention_block(b, T.tensor(x), mask=mask).data
    p = attention_block(b, T.tensor(x[perm]), mask=mask).data
    assert np.allclose(p, a[perm], rtol=0, atol=1e-13)


def test_masked_down_sampling_is_rejected():
    b = _block(q_strides=(1, 2, 2), kv_strides=(1, 2, 2))
    chunks = np.zeros(16, dtype=int)
    with pytest.raises(T.ShapeError):
        attention_block(b, T.tensor(np.zeros((16, D))), mask=build_chunk_mask(chunks, chunks),
                        q_grid=(1, 4, 4))


def test_causal_config_forbids_temporal_query_stride():
    with pytest.raises(ValueError):
        AttentionBlockConfig(D, q_strides=(2, 1, 1), causal=True)


def test_query_without_keys_raises():
    b = _block(causal=True)
    with pytest.raises(MaskError):
        attention_block(b, T.tensor(np.ones((2, D))), T.tensor(np.ones((2, D))),
                        mask=build_chunk_mask([0, 0], [1, 1]))


def test_pair_counter_counts_dense_scores():
    b = _block(causal=True)
    chunks = np.repeat([0, 1, 2], 4)
    c = PairCounter()
    attention_block(b, T.tensor(T.Rng(0).normal((12, D))), mask=build_chunk_mask(chunks, chunks), counter=c)
    assert c.counts["b"] == 12 * 12
