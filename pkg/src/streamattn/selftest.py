"""Quick built-in oracle checks, run by ``streamattn selftest``."""

from __future__ import annotations

import math

import numpy as np

from . import formats, oracles
from . import tensor as T
from .attention import attention_block, build_chunk_mask
from .buffer import spatial_encode
from .inference import make_engine
from .metrics import average_precision
from .model import Model, micro_config
from .streams import long_term_compress, short_term_forward


def _softmax() -> bool:
    x = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    got = T.softmax_rows(T.tensor(x)).data
    want = np.array([oracles.softmax(list(r)) for r in x])
    return bool(np.max(np.abs(got - want)) < 1e-12)


def _gradients() -> bool:
    rng = T.Rng(3)
    w = rng.normal((4, 3))

    def f(x):
        return T.sum_all(T.gelu(T.layer_norm(T.matmul(x, T.tensor(w)), T.tensor(np.ones(3)),
                                             T.tensor(np.zeros(3)))))

    return T.grad_check(f, T.parameter(rng.normal((5, 4)))) < 1e-6


def _model_vs_oracle(model: Model, frames: np.ndarray) -> bool:
    c = model.cfg
    window = [spatial_encode(model.embed(frames[i], i), model.spatial) for i in range(frames.shape[0])]
    raw = [model.embed(frames[i], i).tokens.data for i in range(frames.shape[0])]
    enc = [oracles.spatial_encode(model, r) for r in raw]
    ok = max(np.max(np.abs(a.tokens.data - b)) for a, b in zip(window, enc)) < 1e-12
    mem = long_term_compress(window, model)
    mem_o = oracles.long_term_compress(model, enc)
    ok &= np.max(np.abs(mem.tokens.data - mem_o)) < 1e-12
    short = window[-c.streams.t_short:]
    _, logits = short_term_forward(short, mem, model)
    want = oracles.short_term_forward(model, [w.tokens.data for w in short],
                                      [w.chunk_index for w in short], mem_o)
    return bool(ok and np.max(np.abs(logits.data - want)) < 1e-12)


def _masked_block(model: Model) -> bool:
    rng = T.Rng(5)
    n = model.cfg.chunk.tokens_per_chunk
    x = rng.normal((3 * n, model.cfg.d_model))
    chunks = np.repeat([0, 1, 2], n)
    got = attention_block(model.sm[0], T.tensor(x), mask=build_chunk_mask(chunks, chunks)).data
    want = oracles.attention_block(oracles.block_params(model.sm[0]), x,
                                   admissible=oracles.chunk_admissible(chunks, chunks))
    return bool(np.max(np.abs(got - want)) < 1e-12)


def _engines(model: Model, frames: np.ndarray) -> bool:
    """Without the long branch and before eviction both engines agree bit for bit."""
    frames = frames[: model.cfg.streams.t_short]
    outs = {}
    for mode in ("regular", "efficient"):
        eng = make_engine(model.cfg, model, mode=mode, long_branch=False)
        outs[mode] = np.stack([o.probabilities for o in eng.run(frames)])
    return bool(np.array_equal(outs["regular"], outs["efficient"]))


def _formats() -> bool:
    frames = (np.arange(2 * 2 * 3 * 3) % 256).astype(np.uint8).reshape(2, 2, 3, 3)
    ok = np.array_equal(formats.decode_rsv(formats.encode_rsv(frames)), frames)
    w = {"a": np.array([[1.5, -2.0]]), "b": np.zeros((0,))}
    back = formats.decode_checkpoint(formats.encode_checkpoint(w))
    ok &= all(np.array_equal(back[k], w[k]) for k in w)
    return bool(ok)


def _metrics() -> bool:
    ap = average_precision(np.array([0.9, 0.8, 0.7, 0.6]), np.array([1, 0, 1, 0]))
    return math.isclose(ap, (1.0 + 2.0 / 3.0) / 2.0, abs_tol=1e-12)


def run_selftest(verbose: bool = True) -> bool:
    cfg = micro_config()
    model = Model(cfg)
    frames = T.Rng(11).uniform((cfg.streams.t_long + 2, cfg.chunk.tau, cfg.chunk.frame_height,
                                 cfg.chunk.frame_width, 3), 0.0, 1.0)
    checks = [
        ("softmax", _softmax),
        ("gradients", _gradients),
        ("masked block", lambda: _masked_block(model)),
        ("model vs oracle", lambda: _model_vs_oracle(model, frames)),
        ("efficient == regular", lambda: _engines(model, frames)),
        ("formats", _formats),
        ("metrics", _metrics),
    ]
    ok = True
    for name, fn in checks:
        passed = fn()
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'} {name}")
    return ok
