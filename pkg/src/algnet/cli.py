"""Command-line entry point: ``algnet <subcommand> ...``.

Failures print one JSON line ``{"error": <kind>, "message": <text>}`` to
stderr and exit nonzero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # single-line usage errors instead of argparse's banner
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _report_path(explicit: str | None, default: Path) -> Path:
    return Path(explicit) if explicit else default


def cmd_gen_data(args) -> None:
    from algnet.data import generate_dataset

    if args.count < 1:
        raise ValueError("--count must be >= 1")
    m = generate_dataset(args.out, args.count, args.blur, args.seed, size=args.size,
                         noise_sigma=args.noise, sigma=args.sigma, length=args.length, fmt=args.format)
    print(f"{len(m.pairs)}\t{Path(args.out) / 'manifest.tsv'}")


def cmd_train(args) -> None:
    from algnet import checkpoint as ckpt_io
    from algnet.config import TrainConfig
    from algnet.data import DatasetManifest
    from algnet.train import Trainer

    pairs = DatasetManifest.read(args.data).load_pairs()
    if args.resume:
        ck = ckpt_io.load(args.resume)
        trainer = Trainer.from_checkpoint(ck, pairs)
    else:
        config = TrainConfig.load(args.config) if args.config else TrainConfig()
        if args.iterations is not None:
            config.iterations = args.iterations
            config.__post_init__()
        trainer = Trainer(config, pairs)
    log = trainer.run(args.out)
    if log.steps:
        print(f"{log.steps[-1]}\t{log.losses[-1]:.9g}\t{log.lrs[-1]:.9g}")
    print(f"checkpoint\t{args.out}")


def cmd_infer(args) -> None:
    from algnet.config import TrainConfig
    from algnet.inference import infer_paths, load_for_inference

    expect = TrainConfig.load(args.config).network if args.config else None
    net = load_for_inference(args.ckpt, expect)
    for p in infer_paths(net, args.inp, args.out):
        print(p)


def cmd_eval(args) -> None:
    from algnet import plotting
    from algnet.config import TrainConfig
    from algnet.data import DatasetManifest
    from algnet.inference import evaluate, load_for_inference

    expect = TrainConfig.load(args.config).network if args.config else None
    net = load_for_inference(args.ckpt, expect)
    manifest = DatasetManifest.read(args.data)
    report = evaluate(net, manifest)
    base = evaluate(net, manifest, baseline=True)
    text = report.to_text()
    out = _report_path(args.report, Path(args.ckpt).with_name(Path(args.ckpt).name + ".eval.txt"))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    out.with_name(out.stem + ".baseline.txt").write_text(base.to_text())
    finite = lambda v: v if np.isfinite(v) else 100.0  # noqa: E731
    plotting.metric_bars([r[0] for r in report.rows], [finite(r[1]) for r in report.rows],
                         [finite(r[1]) for r in base.rows], out.with_suffix(".png"))
    sys.stdout.write(text)


def cmd_bench_scan(args) -> None:
    from algnet import plotting
    from algnet.bench import bench_scan, bench_table

    rows = bench_scan(args.k, args.state, args.channels, args.modes, time_invariant=args.time_invariant,
                      repeats=args.repeats, dtype=np.dtype(args.dtype))
    text = bench_table(rows)
    if args.report:
        out = Path(args.report)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        series = {}
        for r in rows:
            ks, secs = series.setdefault(r.mode, ([], []))
            ks.append(r.k)
            secs.append(r.seconds)
        plotting.bench_times(series, out.with_suffix(".png"))
    sys.stdout.write(text)


def cmd_activations(args) -> None:
    from algnet import plotting
    from algnet.data import load_image
    from algnet.inference import activation_table, activations, load_for_inference

    net = load_for_inference(args.ckpt)
    values = activations(net, load_image(args.inp), args.layer)
    text = activation_table(values)
    if args.report:
        out = Path(args.report)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        plotting.activation_bars(values, out.with_suffix(".png"), title=args.layer)
    sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="algnet", description="Selective-SSM image deblurring toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write synthetic sharp/blurred pairs and a manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--blur", choices=("gaussian", "motion"), default="gaussian")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--noise", type=float, default=0.01)
    g.add_argument("--sigma", type=float, default=1.5, help="gaussian blur sigma")
    g.add_argument("--length", type=int, default=9, help="motion blur length in pixels")
    g.add_argument("--format", choices=("ppm", "png"), default="ppm")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a network on a manifest")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="continue from this checkpoint (its config is used)")
    t.add_argument("--iterations", type=int, help="override the configured iteration count")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="restore an image or a directory of images")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="inp", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--config", help="reject checkpoints whose network config differs")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="PSNR/SSIM of restored images against sharp references")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config")
    e.add_argument("--report", help="text report path (a .png plot is written beside it)")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-scan", help="time sequential, parallel and convolution scans")
    b.add_argument("--k", type=_int_list, required=True)
    b.add_argument("--state", type=int, required=True)
    b.add_argument("--channels", type=int, required=True)
    b.add_argument("--modes", type=_str_list, default=["sequential", "parallel"])
    b.add_argument("--time-invariant", action="store_true")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    b.add_argument("--report")
    b.set_defaults(func=cmd_bench_scan)

    a = sub.add_parser("activations", help="per-channel mean ReLU activation of a feature map")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--in", dest="inp", required=True)
    a.add_argument("--layer", default="dec0")
    a.add_argument("--report")
    a.set_defaults(func=cmd_activations)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", str(exc), 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except KeyboardInterrupt:
        return _fail("Interrupted", "interrupted", 130)
    except Exception as exc:  # every failure becomes one parseable line
        return _fail(type(exc).__name__, str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
