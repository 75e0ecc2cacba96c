import numpy as np
import pytest

from streamattn import oracles
from streamattn import tensor as T
from streamattn.buffer import OrderingError, SpatialEncoder, StreamBuffer, spatial_encode
from streamattn.chunking import ChunkTokens
from streamattn.model import Model, micro_config


def _tok(i, d=2):
    return ChunkTokens(i, T.tensor(np.full((3, d), float(i))))


def test_ring_semantics():
    buf = StreamBuffer(3)
    buf.push(_tok(0))
    assert buf.indices() == [0]
    for i in range(1, 4):
        buf.push(_tok(i))
    assert buf.indices() == [1, 2, 3]
    assert buf.newest_index == 3


def test_out_of_order_push():
    buf = StreamBuffer(3).push(_tok(0))
    with pytest.raises(OrderingError):
        buf.push(_tok(2))
    with pytest.raises(OrderingError):
        buf.push(_tok(0))


def test_first_push_may_start_anywhere():
    assert StreamBuffer(2).push(_tok(7)).indices() == [7]


def test_soak():
    buf = StreamBuffer(40)
    for i in range(1000):
        buf.push(_tok(i))
        assert len(buf) == min(i + 1, 40)
        idx = buf.indices()
        assert idx == list(range(idx[0], i + 1))


def test_window_examples():
    buf = StreamBuffer(40)
    for i in range(5):
        buf.push(_tok(i))
    assert len(buf.window_short(8)) == 5 and buf.window_long(8, 32) == []
    for i in range(5, 40):
        buf.push(_tok(i))
    s = [c.chunk_index for c in buf.window_short(8)]
    lo = [c.chunk_index for c in buf.window_long(8, 32)]
    assert s == list(range(32, 40)) and lo == list(range(0, 32))


@pytest.mark.parametrize("t_short,t_long", [(8, 16), (2, 4), (3, 5)])
def test_windows_cover_buffer_at_every_fill_level(t_short, t_long):
    cap = t_short + t_long
    buf = StreamBuffer(cap)
    for n in range(cap + 6):
        s = [c.chunk_index for c in buf.window_short(t_short)]
        lo = [c.chunk_index for c in buf.window_long(t_short, t_long)]
        assert len(s) == min(t_short, len(buf))
        assert len(lo) == min(t_long, max(len(buf) - t_short, 0))
        assert lo + s == buf.indices()[-(len(lo) + len(s)):] if (lo or s) else buf.indices() == []
        assert not set(lo) & set(s)
        buf.push(_tok(n))


def test_empty_stack_is_identity():
    tok = _tok(3)
    out = spatial_encode(tok, SpatialEncoder([]))
    assert out.tokens is tok.tokens


def test_spatial_encode_matches_oracle_and_is_pure():
    model = Model(micro_config())
    rng = T.Rng(0)
    for b in model.spatial.blocks:
        for p in b.params.values():
            p.data = np.array(p.data + rng.normal(p.shape, 0.1))
    x = rng.normal((5, 16))
    a = model.spatial(ChunkTokens(0, T.tensor(x)))
    b = model.spatial(ChunkTokens(9, T.tensor(x)))
    assert np.array_equal(a.tokens.data, b.tokens.data)
    assert np.max(np.abs(a.tokens.data - oracles.spatial_encode(model, x))) < 1e-12
    assert model.spatial.calls == 2
