"""Command-line entry point: ``moc <command> [options]``.

Exit codes: 0 success, 2 usage/config/I-O error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline
from .config import ConfigError, RunConfig, load_config
from .detector import MODES, CheckpointError, NumericalAbort, load_checkpoint, save_checkpoint, train
from .evaluation import detection_scores, trace_csv
from .motion import extract_motion_prior
from .pnm import encode_pgm
from .schedule import delta_align, lambda_align
from .synthgen import Dataset, DatasetError, generate_dataset, load_dataset, save_dataset

log = logging.getLogger("moc")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
CRITERIA = {"cd": "center_divergence", "iou": "iou"}
METRIC_ROWS = ("f_score", "precision", "recall", "ap", "ami", "n1", "n4", "n16", "n64")


class UsageError(Exception):
    pass


# --- helpers -----------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    ev = cfg.eval
    if getattr(args, "all_objects", False):
        ev = replace(ev, all_objects=True)
    if getattr(args, "criterion", None):
        ev = replace(ev, criterion=CRITERIA[args.criterion])
    if getattr(args, "threshold", None) is not None:
        if args.threshold <= 0:
            raise ConfigError("--threshold must be positive")
        ev = replace(ev, threshold=args.threshold)
    tc = cfg.train
    if getattr(args, "seed", None) is not None and args.command != "generate":
        tc = replace(tc, seed=args.seed)
    if getattr(args, "steps", None) is not None:
        if args.steps < 0:
            raise ConfigError("--steps must be non-negative")
        tc = replace(tc, steps=args.steps)
    return replace(cfg, train=tc, eval=ev)


def _manifest(out: Path, args, cfg: RunConfig, seed: int, **extra) -> None:
    doc = {
        "command": args.command,
        "config_file": None if args.config is None else str(args.config),
        "config": cfg.to_dict(),
        "seed": seed,
    }
    doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {out}: {e.strerror}") from e
    return out


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, sort_keys=True) if args.json else text)


def _report_text(report: dict) -> str:
    lines = [f"{k:>10}  {report[k]:.4f}" for k in ("f_score", "precision", "recall", "ap", "ami")]
    lines += [f"{'few-shot ' + k:>10}  {v:.4f}" for k, v in report["few_shot"].items()]
    return "\n".join(lines)


def _load_dataset(path) -> Dataset:
    if not Path(path).is_dir():
        raise UsageError(f"dataset directory {path} does not exist")
    return load_dataset(path)


@contextlib.contextmanager
def _thread_limit():
    """Cap BLAS/OpenMP pools at ``MOC_THREADS`` when it is set."""
    raw = os.environ.get("MOC_THREADS")
    if not raw:
        yield
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"MOC_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


# --- commands ----------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _config(args)
    seed = 0 if args.seed is None else args.seed
    dataset = generate_dataset(cfg.generator, seed)
    out = save_dataset(dataset, _out_dir(args.out))
    payload = {"out": str(out), "seed": seed, "train": len(dataset.train), "test": len(dataset.test)}
    _emit(args, payload, f"wrote {len(dataset)} sequences to {out} (seed {seed})")
    return EXIT_OK


def _boxes_jsonl(per_frame_boxes) -> str:
    lines = []
    for t, boxes in enumerate(per_frame_boxes):
        objs = [
            {"x_min": round(b.x_min, 6), "y_min": round(b.y_min, 6), "x_max": round(b.x_max, 6), "y_max": round(b.y_max, 6), "class": -1, "relevant": True}
            for b in boxes
        ]
        lines.append(json.dumps({"frame": t, "objects": objs}))
    return "\n".join(lines) + "\n" if lines else ""


def cmd_extract_motion(args) -> int:
    cfg = _config(args)
    dataset = _load_dataset(args.dataset)
    out = _out_dir(args.out)
    bg = pipeline.train_background(dataset)
    tc = cfg.train
    c_hats, dets, gts = [], [], []
    k = 0
    for split in ("train", "test"):
        for seq in dataset.split(split):
            d = out / f"seq_{k}"
            d.mkdir(exist_ok=True)
            boxes = []
            for t, frame in enumerate(seq.pixels):
                prior = extract_motion_prior(frame, bg, tc.eta, tc.grid_size, tc.grid_size, tc.min_area)
                (d / f"mask_{t}.pgm").write_bytes(encode_pgm(prior.alpha_hat.astype(np.uint8) * 255))
                boxes.append(prior.boxes)
                c_hats.append(prior.c_hat)
                dets.append(list(prior.boxes))
                gts.append(seq.labels[t])
            (d / "boxes.jsonl").write_text(_boxes_jsonl(boxes))
            k += 1
    scores = detection_scores(dets, gts, cfg.eval.match_config(), cfg.eval.all_objects)
    summary = {
        "frames": len(c_hats),
        "mean_c_hat": float(np.mean(c_hats)) if c_hats else 0.0,
        "f_score": scores["f_score"],
        "precision": scores["precision"],
        "recall": scores["recall"],
    }
    _manifest(out, args, cfg, dataset.seed, dataset=str(args.dataset), summary=summary)
    text = (
        f"{summary['frames']} frames, mean c_hat {summary['mean_c_hat']:.3f}, "
        f"motion F-score {summary['f_score']:.4f} (P {summary['precision']:.4f}, R {summary['recall']:.4f})"
    )
    _emit(args, summary, text)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    tc = cfg.train
    dataset = _load_dataset(args.dataset)
    out = _out_dir(args.out)
    bg = pipeline.train_background(dataset)
    evaluator = lambda params, step: pipeline.evaluate_params(params, dataset, bg, cfg.eval, with_ap=False).as_dict()
    result = train(tc, dataset, args.mode, evaluator=evaluator, background=bg)
    save_checkpoint(out / "checkpoint.json", result.params, tc, result.steps, {"mode": args.mode})
    report = pipeline.evaluate_params(result.params, dataset, bg, cfg.eval).as_dict()
    (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    (out / "metrics.csv").write_text(trace_csv(result.eval_trace))
    (out / "schedule.jsonl").write_text("".join(json.dumps(t.as_dict(), sort_keys=True) + "\n" for t in result.schedule_trace))
    (out / "losses.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in result.trace))
    _manifest(out, args, cfg, tc.seed, mode=args.mode, steps=result.steps, dataset=str(args.dataset))
    _emit(args, {"mode": args.mode, "seed": tc.seed, "steps": result.steps, **report},
          f"trained {args.mode} for {result.steps} steps (seed {tc.seed}) -> {out}\n{_report_text(report)}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    dataset = _load_dataset(args.dataset)
    params, blob = load_checkpoint(args.checkpoint, cfg.train.architecture(dataset.config.height, dataset.config.width))
    bg = pipeline.train_background(dataset)
    report = pipeline.evaluate_params(params, dataset, bg, cfg.eval, split=args.split).as_dict()
    if args.out:
        out = _out_dir(args.out)
        (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
        _manifest(out, args, cfg, blob.get("seed"), checkpoint=str(args.checkpoint), dataset=str(args.dataset), split=args.split)
    _emit(args, report, _report_text(report))
    return EXIT_OK


def _flat_metrics(report: dict) -> dict:
    flat = {k: report.get(k) for k in ("f_score", "precision", "recall", "ap", "ami")}
    flat.update(report.get("few_shot", {}))
    return flat


def cmd_compare(args) -> int:
    columns = []
    for run in args.runs:
        path = Path(run) / "metrics.json"
        try:
            report = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"{path}: metrics file not found") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: invalid JSON ({e})") from e
        name = Path(run).name
        mpath = Path(run) / "manifest.json"
        if mpath.exists():
            m = json.loads(mpath.read_text())
            name = f"{name} ({m.get('mode', m.get('command'))}, seed {m.get('seed')})"
        columns.append((name, _flat_metrics(report)))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric"] + [n for n, _ in columns])
    for key in METRIC_ROWS:
        writer.writerow([key] + [_fmt(c.get(key)) for _, c in columns])
    if args.out:
        _out_dir(args.out)
        (Path(args.out) / "compare.csv").write_text(buf.getvalue())
    if args.json:
        print(json.dumps({n: c for n, c in columns}, sort_keys=True))
    else:
        width = max(len(n) for n, _ in columns)
        print(f"{'metric':<10}" + "".join(f"  {n:>{width}}" for n, _ in columns))
        for key in METRIC_ROWS:
            print(f"{key:<10}" + "".join(f"  {_fmt(c.get(key)):>{width}}" for _, c in columns))
    return EXIT_OK


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def cmd_schedule(args) -> int:
    if args.run is not None:
        path = Path(args.run) / "schedule.jsonl"
        try:
            rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        except FileNotFoundError:
            raise UsageError(f"{path}: schedule trace not found") from None
    else:
        if args.bbms is None or args.c is None or args.c_hat is None:
            raise UsageError("give a run directory or all of --bbms, --c and --c-hat")
        params = load_config(args.config).train.schedule
        delta = delta_align(args.bbms, args.c, args.c_hat, params)
        rows = [{"epoch": None, "bbms": args.bbms, "c": args.c, "c_hat": args.c_hat, "delta_align": delta, "lambda_align": lambda_align(delta)}]
    if args.json:
        print(json.dumps(rows, sort_keys=True))
        return EXIT_OK
    print(f"{'epoch':>5}  {'bbms':>9}  {'c':>6}  {'c_hat':>6}  {'delta':>10}  {'lambda':>8}")
    for r in rows:
        epoch = "-" if r["epoch"] is None else r["epoch"]
        print(f"{epoch:>5}  {r['bbms']:>9.4f}  {r['c']:>6}  {r['c_hat']:>6}  {r['delta_align']:>10.4f}  {r['lambda_align']:>8.4g}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    metrics = argparse.ArgumentParser(add_help=False)
    metrics.add_argument("--all-objects", action="store_true", help="keep objects flagged irrelevant")
    metrics.add_argument("--criterion", choices=sorted(CRITERIA), help="match criterion: center divergence or IoU")
    metrics.add_argument("--threshold", type=float, help="match threshold")

    p = argparse.ArgumentParser(prog="moc", description="Motion and object continuity training on synthetic sprites.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, help="dataset seed (default 0)")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.set_defaults(func=cmd_generate)

    m = sub.add_parser("extract-motion", parents=[common, metrics], help="dump motion masks and prior boxes")
    m.add_argument("dataset", help="dataset directory")
    m.add_argument("--out", required=True, help="output directory")
    m.set_defaults(func=cmd_extract_motion)

    t = sub.add_parser("train", parents=[common, metrics], help="train a detector")
    t.add_argument("dataset", help="dataset directory")
    t.add_argument("--mode", choices=MODES, default="full-moc")
    t.add_argument("--seed", type=int, help="training seed")
    t.add_argument("--steps", type=int, help="gradient steps")
    t.add_argument("--out", required=True, help="run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common, metrics], help="evaluate a checkpoint")
    e.add_argument("checkpoint", help="checkpoint file")
    e.add_argument("dataset", help="dataset directory")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--out", help="directory for metrics.json")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", parents=[common], help="side-by-side metrics of run directories")
    c.add_argument("runs", nargs="+", help="run directories holding metrics.json")
    c.add_argument("--out", help="directory for compare.csv")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("schedule", parents=[common], help="show a schedule trace or evaluate the schedule rule")
    s.add_argument("run", nargs="?", help="run directory holding schedule.jsonl")
    s.add_argument("--bbms", type=float)
    s.add_argument("--c", type=float)
    s.add_argument("--c-hat", type=float)
    s.set_defaults(func=cmd_schedule)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except NumericalAbort as e:
        print(f"moc: numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DatasetError, CheckpointError, UsageError) as e:
        print(f"moc: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"moc: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
