import struct

import numpy as np
import pytest

from streamattn import formats
from streamattn.formats import FormatError
from streamattn.inference import make_engine
from streamattn.model import Model, micro_config
from streamattn.tensor import Rng


def test_rsv_round_trip(tmp_path):
    frames = Rng(0).integers(0, 256, (5, 6, 4, 3)).astype(np.uint8)
    formats.write_rsv(tmp_path / "a.rsv", frames)
    back = formats.read_rsv(tmp_path / "a.rsv")
    assert back.dtype == np.uint8 and np.array_equal(back, frames)
    assert (tmp_path / "a.rsv").read_bytes()[:20] == b"RSV1" + struct.pack("<4I", 4, 6, 3, 5)


def test_rsv_size_and_truncation():
    buf = formats.encode_rsv(np.zeros((1, 2, 2, 3), dtype=np.uint8))
    assert len(buf) == 20 + 12  # magic + four u32 fields, then one 2x2x3 frame
    with pytest.raises(FormatError, match="31"):
        formats.decode_rsv(buf[:-1])


@pytest.mark.parametrize("buf,offset", [
    (b"RSV2" + bytes(16), "0"),
    (b"RSV1" + struct.pack("<4I", 1, 1, 4, 1) + bytes(4), "12"),
    (b"RSV1" + bytes(6), "10"),
])
def test_rsv_errors_name_offsets(buf, offset):
    with pytest.raises(FormatError, match=offset):
        formats.decode_rsv(buf)


def test_rsv_rejects_bad_arrays():
    with pytest.raises(FormatError):
        formats.encode_rsv(np.zeros((1, 2, 2, 3)))
    with pytest.raises(FormatError):
        formats.encode_rsv(np.zeros((1, 2, 2, 4), dtype=np.uint8))


def test_unit_conversion():
    u8 = np.array([0, 51, 255], dtype=np.uint8)
    assert np.array_equal(formats.to_unit(u8), [0.0, 0.2, 1.0])
    assert np.array_equal(formats.to_uint8(formats.to_unit(u8)), u8)
    assert formats.chunk_frames(np.zeros((9, 2, 2, 3)), 4).shape == (2, 4, 2, 2, 3)


def test_empty_checkpoint_is_12_bytes(tmp_path):
    formats.save_checkpoint(tmp_path / "e.e2ew", {})
    data = (tmp_path / "e.e2ew").read_bytes()
    assert data == b"E2EW" + struct.pack("<II", 1, 0)
    assert formats.load_checkpoint(tmp_path / "e.e2ew") == {}


def test_checkpoint_layout():
    buf = formats.encode_checkpoint({"ab": np.array([[1.0, 2.0]])})
    want = (b"E2EW" + struct.pack("<II", 1, 1) + struct.pack("<H", 2) + b"ab" + struct.pack("<B", 1 + 1)
            + struct.pack("<2I", 1, 2) + struct.pack("<2f", 1.0, 2.0))
    assert buf == want


def test_checkpoint_rejections():
    good = formats.encode_checkpoint({"w": np.ones(3)})
    with pytest.raises(FormatError, match="magic"):
        formats.decode_checkpoint(b"E2EX" + good[4:])
    with pytest.raises(FormatError, match="version"):
        formats.decode_checkpoint(good[:4] + struct.pack("<I", 2) + good[8:])
    dup = good[:8] + struct.pack("<I", 2) + good[12:] + good[12:]
    with pytest.raises(FormatError, match="duplicate"):
        formats.decode_checkpoint(dup)
    with pytest.raises(FormatError):
        formats.decode_checkpoint(good[:-1])


def test_checkpoint_rounds_to_nearest_f32():
    x = np.array([1.0 + 2.0 ** -30, np.pi, -1e-8])
    back = formats.decode_checkpoint(formats.encode_checkpoint({"x": x}))["x"]
    assert np.array_equal(back, x.astype(np.float32).astype(np.float64))


def test_checkpoint_forward_reproduction(tmp_path):
    cfg = micro_config()
    model = Model(cfg)
    formats.save_checkpoint(tmp_path / "m.e2ew", model.state_dict())
    loaded = formats.load_checkpoint(tmp_path / "m.e2ew")
    c = cfg.chunk
    frames = Rng(1).uniform((8, c.tau, c.frame_height, c.frame_width, 3), 0, 1)
    a = np.stack([o.probabilities for o in make_engine(cfg, model).run(frames)])
    b = np.stack([o.probabilities for o in make_engine(cfg, loaded).run(frames)])
    assert np.max(np.abs(a - b) / np.abs(a)) < 1e-6
