"""Slow reference evaluations used to cross-check the engine.

Nothing here touches :mod:`streamattn.tensor`; attention is a loop over
admissible (query, key) pairs with scalar exponentials, and down-sampling is an
explicit loop over stride-aligned blocks.
"""

from __future__ import annotations

import math

import numpy as np


def softmax(row: list[float]) -> list[float]:
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = math.fsum(e)
    return [v / s for v in e]


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    out = np.empty_like(x)
    for i, row in enumerate(x):
        mu = math.fsum(row) / len(row)
        var = math.fsum((v - mu) ** 2 for v in row) / len(row)
        out[i] = (row - mu) / math.sqrt(var + eps) * gamma + beta
    return out


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    out = np.empty((x.shape[0], w.shape[1]))
    for i, row in enumerate(x):
        for j in range(w.shape[1]):
            out[i, j] = math.fsum(row * w[:, j])
    return out if b is None else out + b


def gelu(x: np.ndarray) -> np.ndarray:
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def downsample(x: np.ndarray, grid, strides, kernel: np.ndarray | None = None,
               bias: np.ndarray | None = None) -> np.ndarray:
    """Block mean (``kernel=None``) or per-channel weighted block sum."""
    t, h, w = grid
    st, sh, sw = strides
    if (st, sh, sw) == (1, 1, 1):
        return x.copy()
    d = x.shape[1]
    rows = []
    for ot in range(t // st):
        for oh in range(h // sh):
            for ow in range(w // sw):
                acc = np.zeros(d)
                p = 0
                for a in range(st):
                    for b in range(sh):
                        for c in range(sw):
                            src = ((ot * st + a) * h + (oh * sh + b)) * w + (ow * sw + c)
                            acc += x[src] * (kernel[p] if kernel is not None else 1.0 / (st * sh * sw))
                            p += 1
                rows.append(acc + (bias if bias is not None else 0.0))
    return np.array(rows)


def attention_block(params: dict[str, np.ndarray], x_query: np.ndarray, x_kv: np.ndarray | None = None,
                    admissible: np.ndarray | None = None, q_grid=None, kv_grid=None,
                    q_strides=(1, 1, 1), kv_strides=(1, 1, 1)) -> np.ndarray:
    """Reference block; ``params`` uses the same keys as ``AttentionBlock.params``."""
    p = {k: np.asarray(v.data if hasattr(v, "data") else v) for k, v in params.items()}
    if x_kv is None:
        x_kv, kv_grid = x_query, q_grid
    d = x_query.shape[1]
    hq = layer_norm(x_query, p["norm1.gamma"], p["norm1.beta"])
    hk = layer_norm(x_kv, p["norm1.gamma"], p["norm1.beta"])
    q = linear(hq, p["wq"])
    k = linear(hk, p["wk"])
    v = linear(hk, p["wv"])
    if tuple(q_strides) != (1, 1, 1):
        q = downsample(q, q_grid, q_strides, p["pool_q.kernel"], p["pool_q.bias"])
    if tuple(kv_strides) != (1, 1, 1):
        k = downsample(k, kv_grid, kv_strides, p["pool_k.kernel"], p["pool_k.bias"])
        v = downsample(v, kv_grid, kv_strides, p["pool_v.kernel"], p["pool_v.bias"])
    scale = 1.0 / math.sqrt(d)
    att = np.zeros((q.shape[0], d))
    for i in range(q.shape[0]):
        keys = [j for j in range(k.shape[0]) if admissible is None or admissible[i, j]]
        if not keys:
            raise ValueError(f"query {i} has no admissible key")
        weights = softmax([math.fsum(q[i] * k[j]) * scale for j in keys])
        for wgt, j in zip(weights, keys):
            att[i] += wgt * v[j]
    res = downsample(x_query, q_grid, q_strides) if tuple(q_strides) != (1, 1, 1) else x_query
    mixed = att + res
    h = layer_norm(mixed, p["norm2.gamma"], p["norm2.beta"])
    h = linear(gelu(linear(h, p["mlp.w1"], p["mlp.b1"])), p["mlp.w2"], p["mlp.b2"])
    return mixed + h


def block_params(block) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in block.params.items()}


def chunk_admissible(query_chunks, key_chunks) -> np.ndarray:
    q = np.asarray(query_chunks)
    k = np.asarray(key_chunks)
    return k[None, :] <= q[:, None]


def spatial_encode(model, tokens: np.ndarray) -> np.ndarray:
    for b in model.spatial.blocks:
        tokens = attention_block(block_params(b), tokens)
    return tokens


def long_term_compress(model, window_tokens: list[np.ndarray]) -> np.ndarray | None:
    """``window_tokens``: per-chunk token arrays (CLS last), oldest first."""
    s = model.cfg.streams
    red = math.prod(s.lc_temporal_factors)
    usable = len(window_tokens) // red * red
    if usable == 0:
        return None
    window_tokens = window_tokens[len(window_tokens) - usable:]
    c = model.cfg.chunk
    x = np.concatenate([t[:-1] for t in window_tokens], axis=0)
    grid = (usable, c.n_h, c.n_w)
    for i, (b, f) in enumerate(zip(model.lc, s.lc_temporal_factors)):
        sp = s.lc_spatial_factor if i == 0 else 1
        strides = (f, sp, sp)
        x = attention_block(block_params(b), x, q_grid=grid, q_strides=strides, kv_strides=strides)
        grid = (grid[0] // f, grid[1] // sp, grid[2] // sp)
    return x


def short_term_forward(model, window_tokens: list[np.ndarray], chunk_indices: list[int],
                       memory: np.ndarray | None) -> np.ndarray:
    """Logits ``(n, C)`` of a causal pass over the concatenated short window."""
    s = model.cfg.streams
    n_tok = window_tokens[0].shape[0]
    x = np.concatenate(window_tokens, axis=0)
    chunks = np.repeat(np.asarray(chunk_indices), n_tok)
    for layer, b in enumerate(model.sm):
        fused = memory is not None and layer == s.fusion_layer - 1
        if fused and s.fusion_op == "self_attention":
            kv = np.concatenate([memory, x], axis=0)
            adm = chunk_admissible(chunks, np.concatenate([np.full(len(memory), -1), chunks]))
            x = attention_block(block_params(b), x, kv, adm)
        else:
            x = attention_block(block_params(b), x, None, chunk_admissible(chunks, chunks))
        if fused and s.fusion_op == "cross_attention":
            x = attention_block(block_params(model.fusion), x, memory)
    cls = x[n_tok - 1::n_tok]
    return linear(cls, model.head["weight"].data, model.head["bias"].data)
