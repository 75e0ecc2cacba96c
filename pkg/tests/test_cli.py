import csv
import subprocess
import sys

import numpy as np
import pytest

from streamattn import formats
from streamattn.cli import run_cli
from streamattn.tensor import Rng

MICRO = """\
# micro geometry: 8x8 frames, 4 patches + CLS
tau = 2
t_sample = 1
frame_height = 8
frame_width = 8
patch_h = 4
patch_w = 4
d_model = 16
l_sb = 1
l_sm = 2
l_lc = 2
t_short = 2
t_long = 4
lc_temporal_factors = 2, 1
fusion_layer = 1
num_classes = 3
cue_size = 4
cue_distance_chunks = 3
action_len_chunks = 2
stream_len_chunks = 40
val_stream_len_chunks = 16
steps_per_epoch = 2
batch_size = 2
train_t_long = 4
eval_t_long_list = 2, 4
grad_clip = 5.0
bench_t_short_list = 2, 3
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "micro.cfg"
    p.write_text(MICRO)
    return str(p)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_selftest_exits_zero():
    assert run_cli(["selftest"]) == 0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "streamattn", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "selftest" in proc.stdout


def test_usage_errors_exit_2(tmp_path, cfg_path, capsys):
    assert run_cli([]) == 2
    assert run_cli(["frobnicate"]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("d_model = 16\n# ok\nwidth = 3\n")
    assert run_cli(["selftest", "--config", str(bad)]) == 2
    assert "line 3" in capsys.readouterr().err
    assert run_cli(["infer", "--config", cfg_path, "--checkpoint", str(tmp_path / "missing.e2ew")]) == 2
    assert run_cli(["bench", "--config", cfg_path, "--modes", "fast", "--out", str(tmp_path)]) == 2


def test_runtime_failure_exits_1(tmp_path, cfg_path):
    (tmp_path / "junk.rsv").write_bytes(b"nope")
    assert run_cli(["infer", "--config", cfg_path, "--input", str(tmp_path / "junk.rsv"),
                    "--out", str(tmp_path)]) == 1


def test_infer_modes_identical_before_eviction(tmp_path, cfg_path):
    frames = (Rng(0).uniform((2 * 2, 8, 8, 3), 0, 1) * 255).astype(np.uint8)  # T_S chunks of tau frames
    formats.write_rsv(tmp_path / "s.rsv", frames)
    outs = []
    for mode in ("regular", "efficient"):
        out = tmp_path / mode
        assert run_cli(["infer", "--config", cfg_path, "--input", str(tmp_path / "s.rsv"), "--preset", "baseline",
                        "--mode", mode, "--out", str(out)]) == 0
        outs.append((out / "predictions.csv").read_bytes())
    assert outs[0] == outs[1]
    assert _rows(tmp_path / "regular" / "predictions.csv")[0] == ["chunk_index", "p0", "p1", "p2"]


def test_gen_train_infer_pipeline(tmp_path, cfg_path):
    out = str(tmp_path)
    assert run_cli(["gen-data", "--config", cfg_path, "--out", out]) == 0
    assert run_cli(["train", "--config", cfg_path, "--out", out, "--seed", "1"]) == 0
    ckpt = tmp_path / "checkpoint.e2ew"
    assert ckpt.exists() and (tmp_path / "checkpoint_epoch000.e2ew").exists()
    assert len(_rows(tmp_path / "train_log.csv")) == 3
    assert run_cli(["--seed", "1", "infer", "--config", cfg_path, "--checkpoint", str(ckpt), "--input",
                    str(tmp_path / "stream.rsv"), "--labels", str(tmp_path / "labels.csv"), "--mode",
                    "efficient", "--dump-attention", "--out", out]) == 0
    preds = _rows(tmp_path / "predictions.csv")
    assert len(preds) == 41
    assert all(abs(sum(float(v) for v in r[1:]) - 1) < 1e-12 for r in preds[1:])
    metrics = _rows(tmp_path / "metrics.csv")
    assert metrics[0][:3] == ["map", "mcap", "accuracy"]
    dump = _rows(tmp_path / "attention" / "step_000039.csv")
    assert dump[0] == ["layer", "query_token", "key_token", "weight"]
    assert {r[0] for r in dump[1:]} == {"sm.0", "fusion", "sm.1"}
    assert run_cli(["eval-lengths", "--config", cfg_path, "--checkpoint", str(ckpt), "--out", out]) == 0
    assert [r[0] for r in _rows(tmp_path / "lengths.csv")[1:]] == ["2", "4"]


def test_bench_writes_rows(tmp_path, cfg_path):
    assert run_cli(["bench", "--config", cfg_path, "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "bench.csv")
    assert rows[0] == ["mode", "T_S", "mean_ns", "p95_ns", "steps_per_sec", "pair_count"]
    counts = {(r[0], r[1]): int(r[5]) for r in rows[1:]}
    for t in (2, 3):
        assert counts[("regular", str(t))] == t * counts[("efficient", str(t))]
