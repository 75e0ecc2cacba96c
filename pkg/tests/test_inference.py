import numpy as np
import pytest

from streamattn import tensor as T
from streamattn.buffer import OrderingError
from streamattn.inference import PRESETS, make_engine, step_efficient, step_regular
from streamattn.model import ConfigError, Model, micro_config


def _frames(cfg, n, seed=0):
    c = cfg.chunk
    return T.Rng(seed).uniform((n, c.tau, c.frame_height, c.frame_width, 3), 0, 1)


@pytest.fixture(scope="module")
def micro():
    cfg = micro_config().with_streams(t_short=4, t_long=4)
    return Model(cfg)


def _probs(engine, frames):
    return np.stack([o.probabilities for o in engine.run(frames)])


def test_first_step_is_a_distribution(micro):
    for mode in ("regular", "efficient"):
        out = make_engine(micro.cfg, micro, mode=mode).step(_frames(micro.cfg, 1)[0])
        assert out.chunk_index == 0
        assert abs(out.probabilities.sum() - 1.0) < 1e-12


def test_pre_eviction_equivalence(micro):
    frames = _frames(micro.cfg, micro.cfg.streams.t_short)
    ri = make_engine(micro.cfg, micro, mode="regular", long_branch=False)
    ei = make_engine(micro.cfg, micro, mode="efficient", long_branch=False)
    for f in frames:
        assert np.array_equal(step_regular(ri, f).probabilities, step_efficient(ei, f).probabilities)


def test_receptive_field_expands_after_eviction(micro):
    t_s = micro.cfg.streams.t_short
    n = 2 * t_s
    frames = _frames(micro.cfg, n + 1)
    pert = frames.copy()
    pert[n - t_s] += T.Rng(1).normal(pert[n - t_s].shape, 0.3)
    out = {}
    for mode in ("regular", "efficient"):
        a = _probs(make_engine(micro.cfg, micro, mode=mode, long_branch=False), frames)
        b = _probs(make_engine(micro.cfg, micro, mode=mode, long_branch=False), pert)
        out[mode] = np.max(np.abs(a[n] - b[n]))
    assert out["regular"] == 0.0
    assert out["efficient"] > 1e-9


def test_pair_counts(micro):
    s = micro.cfg.streams
    n_tok = micro.cfg.chunk.tokens_per_chunk
    frames = _frames(micro.cfg, s.t_short + 2)
    for mode, want in (("regular", (s.t_short * n_tok) ** 2), ("efficient", n_tok * s.t_short * n_tok)):
        outs = make_engine(micro.cfg, micro, mode=mode).run(frames)
        assert outs[-1].pair_counts["sm.0"] == want


def test_each_chunk_layer_computed_once(micro):
    n = 12
    eng = make_engine(micro.cfg, micro, mode="efficient")
    eng.run(_frames(micro.cfg, n))
    assert eng.cache.computed == [n] * micro.cfg.streams.l_sm
    assert all(len(q) == micro.cfg.streams.t_short - 1 for q in eng.cache.kv)


@pytest.mark.parametrize("mode", ["regular", "efficient"])
def test_single_encode(micro, mode):
    eng = make_engine(micro.cfg, micro, mode=mode)
    eng.run(_frames(micro.cfg, 30))
    assert eng.spatial_calls == 30


@pytest.mark.parametrize("mode", ["regular", "efficient"])
def test_determinism_and_distributions(mode):
    cfg = micro_config()
    frames = _frames(cfg, 10)
    a = _probs(make_engine(cfg, None, mode=mode), frames)
    b = _probs(make_engine(cfg, Model(cfg).state_dict(), mode=mode), frames)
    assert np.array_equal(a, b)
    assert np.all(np.abs(a.sum(axis=1) - 1.0) < 1e-12)


def test_ordering(micro):
    eng = make_engine(micro.cfg, micro)
    f = _frames(micro.cfg, 1)[0]
    eng.step(f, 0)
    with pytest.raises(OrderingError):
        eng.step(f, 2)


def test_presets(micro):
    assert PRESETS["baseline"] == (False, "regular")
    assert PRESETS["full"] == (True, "efficient")
    eng = make_engine(micro.cfg, micro, preset="baseline+ei")
    assert (eng.long_branch, eng.mode) == (False, "efficient")
    eng = make_engine(micro.cfg, micro, preset="full", mode="regular")
    assert (eng.long_branch, eng.mode) == (True, "regular")
    with pytest.raises(ValueError):
        make_engine(micro.cfg, micro, preset="fast")


def test_mismatched_weights():
    cfg = micro_config()
    w = Model(cfg).state_dict()
    w["head.bias"] = np.zeros(7)
    with pytest.raises(ConfigError):
        make_engine(cfg, w)
    del w["head.bias"]
    with pytest.raises(ConfigError):
        make_engine(cfg, w)


def test_refresh_interval_reuses_memory(micro):
    frames = _frames(micro.cfg, 12)
    a = make_engine(micro.cfg, micro, lc_refresh_interval=1)
    b = make_engine(micro.cfg, micro, lc_refresh_interval=3)
    pa, pb = _probs(a, frames), _probs(b, frames)
    assert not np.array_equal(pa, pb)


def test_attention_dump(micro):
    eng = make_engine(micro.cfg, micro, mode="efficient", dump_attention=True)
    outs = eng.run(_frames(micro.cfg, 6))
    labels = [lab for lab, _ in outs[-1].attention_dump]
    assert labels == ["sm.0", "fusion", "sm.1"]
    for _, w in outs[-1].attention_dump:
        assert np.allclose(w.sum(axis=1), 1.0, rtol=0, atol=1e-12)
