"""Command-line driver.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import formats
from .bench import bench, write_bench_csv
from .config import ConfigFileError, RunConfig, dump_config, load_config
from .inference import MODES, PRESETS, make_engine
from .metrics import MetricReport
from .model import ConfigError, Model
from .training import SynthStream, evaluate_lengths, generate_stream, train

log = logging.getLogger("streamattn")


class UsageError(Exception):
    pass


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="key = value configuration file")
    p.add_argument("--seed", type=int, default=d, help="seed for weights, data and sampling")
    p.add_argument("--out", default=argparse.SUPPRESS if suppress else ".", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamattn", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        return p

    p = cmd("gen-data", "write a synthetic stream as RSV plus labels CSV")
    p.add_argument("--chunks", type=int, help="stream length in chunks (default: config)")

    p = cmd("train", "train on synthetic streams; checkpoint after each epoch")
    p.add_argument("--preset", choices=sorted(PRESETS), help="trains the long branch unless baseline/baseline+ei")

    p = cmd("infer", "stream a video through an engine and write predictions")
    p.add_argument("--checkpoint", help="E2EW weights (default: seeded initialisation)")
    p.add_argument("--input", help="RSV stream (default: synthetic stream from config)")
    p.add_argument("--labels", help="labels CSV for metrics")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--dump-attention", action="store_true")

    p = cmd("bench", "latency and attention-pair sweep")
    p.add_argument("--checkpoint")
    p.add_argument("--input")
    p.add_argument("--modes", default="regular,efficient")
    p.add_argument("--t-short-list", help="comma separated (default: config bench_t_short_list)")
    p.add_argument("--long-branch", action="store_true")
    p.add_argument("--repeats", type=int, default=1)

    p = cmd("eval-lengths", "evaluate one checkpoint at several long-window lengths")
    p.add_argument("--checkpoint")
    p.add_argument("--t-long-list", help="comma separated (default: config eval_t_long_list)")
    p.add_argument("--mode", choices=MODES, default="regular")

    cmd("selftest", "run the built-in oracle checks")
    return parser


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"expected a comma separated integer list, got {text!r}") from None


def _model(cfg: RunConfig, checkpoint: str | None) -> Model:
    model = Model(cfg.model)
    if checkpoint:
        model.load_state_dict(formats.load_checkpoint(checkpoint))
    return model


def _stream(cfg: RunConfig, path: str | None, labels: str | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    """Chunked frames in [0, 1] and optional one-hot labels."""
    if path is None:
        s = generate_stream(cfg.val_task())
        return s.frames, s.labels
    raw = formats.read_rsv(path)
    c = cfg.model.chunk
    if raw.shape[1:3] != (c.frame_height, c.frame_width):
        raise ConfigError(f"stream frames are {raw.shape[2]}x{raw.shape[1]}, model expects "
                          f"{c.frame_width}x{c.frame_height}")
    frames = formats.chunk_frames(formats.to_unit(raw), c.tau)
    lab = read_labels(labels, cfg.model.streams.num_classes) if labels else None
    if lab is not None:
        lab = lab[: frames.shape[0]]
    return frames, lab


def write_labels(path, labels: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["chunk_index", "label"])
        for i, c in enumerate(labels.argmax(axis=1)):
            w.writerow([i, int(c)])


def read_labels(path, num_classes: int) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.eye(num_classes)[[int(r["label"]) for r in rows]]


def write_predictions(path, outputs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        n = len(outputs[0].probabilities) if outputs else 0
        w.writerow(["chunk_index"] + [f"p{c}" for c in range(n)])
        for o in outputs:
            w.writerow([o.chunk_index] + [repr(float(p)) for p in o.probabilities])


def write_attention(directory: Path, outputs) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for o in outputs:
        with open(directory / f"step_{o.chunk_index:06d}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "query_token", "key_token", "weight"])
            for label, weights in o.attention_dump or ():
                for q in range(weights.shape[0]):
                    for k in range(weights.shape[1]):
                        w.writerow([label, q, k, repr(float(weights[q, k]))])


def cmd_gen_data(args, cfg: RunConfig, out: Path) -> int:
    task = cfg.task if args.chunks is None else replace(cfg.task, stream_len_chunks=args.chunks)
    s = generate_stream(task)
    frames = formats.to_uint8(s.frames.reshape(-1, *s.frames.shape[2:]))
    formats.write_rsv(out / "stream.rsv", frames)
    write_labels(out / "labels.csv", s.labels)
    log.info("wrote %d chunks (%d frames) to %s", s.n_chunks, frames.shape[0], out)
    return 0


def cmd_train(args, cfg: RunConfig, out: Path) -> int:
    long_branch = cfg.model.long_branch
    if args.preset:
        long_branch = PRESETS[args.preset][0]
    model = Model(cfg.model)
    stream = generate_stream(cfg.task)
    val = generate_stream(cfg.val_task())
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")

    def checkpoint(epoch: int, m: Model) -> None:
        formats.save_checkpoint(out / f"checkpoint_epoch{epoch:03d}.e2ew", m.state_dict())
        formats.save_checkpoint(out / "checkpoint.e2ew", m.state_dict())

    result = train(model, stream, cfg.train, long_branch=long_branch, validation=val, on_epoch=checkpoint)
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(result.losses):
            w.writerow([i, repr(v)])
    with open(out / "validation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "t_long", "mode", "accuracy", "map"])
        for r in result.validation:
            w.writerow([r["epoch"], r["t_long"], r["mode"], r["accuracy"], r["map"]])
    return 0


def cmd_infer(args, cfg: RunConfig, out: Path) -> int:
    model = _model(cfg, args.checkpoint)
    frames, labels = _stream(cfg, args.input, args.labels)
    engine = make_engine(cfg.model, model, mode=args.mode, preset=args.preset,
                         lc_refresh_interval=cfg.extra["lc_refresh_interval"],
                         dump_attention=args.dump_attention)
    outputs = engine.run(frames)
    write_predictions(out / "predictions.csv", outputs)
    if args.dump_attention:
        write_attention(out / "attention", outputs)
    if labels is not None:
        probs = np.stack([o.probabilities for o in outputs])
        rep = MetricReport.build(probs, labels, [o.latency_ns for o in outputs], warmup=engine.t_short)
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["map", "mcap", "accuracy", "mean_ns", "p50_ns", "p95_ns", "steps_per_sec"])
            w.writerow([rep.map, rep.mcap, rep.accuracy, rep.mean_ns, rep.p50_ns, rep.p95_ns, rep.steps_per_sec])
    return 0


def cmd_bench(args, cfg: RunConfig, out: Path) -> int:
    model = _model(cfg, args.checkpoint)
    t_list = _ints(args.t_short_list) if args.t_short_list else list(cfg.extra["bench_t_short_list"])
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in MODES:
            raise UsageError(f"unknown mode {m!r}")
    if args.input:
        frames, _ = _stream(cfg, args.input)
    else:
        n = cfg.extra["bench_stream_chunks"] or 3 * max(t_list)
        frames = generate_stream(replace(cfg.val_task(), stream_len_chunks=n)).frames
    rows = bench(model, modes, t_list, frames, long_branch=args.long_branch, repeats=args.repeats)
    write_bench_csv(out / "bench.csv", rows)
    return 0


def cmd_eval_lengths(args, cfg: RunConfig, out: Path) -> int:
    model = _model(cfg, args.checkpoint)
    t_list = _ints(args.t_long_list) if args.t_long_list else list(cfg.train.eval_t_long_list)
    val = generate_stream(cfg.val_task())
    rows = evaluate_lengths(model, val, t_list, mode=args.mode, long_branch=True)
    with open(out / "lengths.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_long", "mode", "accuracy", "map"])
        for r in rows:
            w.writerow([r["t_long"], r["mode"], r["accuracy"], r["map"]])
    return 0


def cmd_selftest(args, cfg: RunConfig, out: Path) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest() else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "bench": cmd_bench,
    "eval-lengths": cmd_eval_lengths,
    "selftest": cmd_selftest,
}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out)
    except (ConfigFileError, UsageError, ConfigError) as exc:
        print(f"streamattn: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"streamattn: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"streamattn: failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
