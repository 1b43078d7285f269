"""Command-line entry point: ``auxnet {train,eval,predict,inspect-ratio,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as C
from . import network as N
from ._io import atomic_write
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataFormatError, DataSpec, apply_normalization, load_dataset, load_files
from .gradcheck import KERNELS, certify
from .inference import evaluate_heads, safe_predict
from .instrumentation import MetricsWriter, export_ratio_csv, supervision_ratio
from .training import STRATEGIES, TrainingDiverged, train


class CLIError(Exception):
    pass


def _strategy_list(text):
    out = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in out if s not in STRATEGIES]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"strategies must be from {', '.join(STRATEGIES)}, got {text!r}")
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="auxnet", description="Residual networks with auxiliary output heads.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True, help="run config (JSON)")
    t.add_argument("--strategy", choices=STRATEGIES, help="override train.strategy")
    t.add_argument("--seed", type=int, help="override train.seed")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--out-dir", default="auxnet-out", help="output directory (default: %(default)s)")
    t.add_argument("--checkpoint", help="checkpoint path (default: OUT_DIR/model.ckpt)")
    t.set_defaults(subparser=t)

    def data_args(q, labels=True):
        q.add_argument("--checkpoint", required=True, help="model checkpoint")
        q.add_argument("--data", help="IDX images or CIFAR-10 .bin file (default: the checkpoint's test split)")
        if labels:
            q.add_argument("--labels", help="IDX labels for --data (default: guessed from the images path)")

    e = sub.add_parser("eval", help="per-head and safe-prediction test error")
    data_args(e)
    e.add_argument("--out-dir", help="also write eval.json here")

    pr = sub.add_parser("predict", help="per-sample predictions as JSON lines")
    data_args(pr, labels=False)
    mode = pr.add_mutually_exclusive_group()
    mode.add_argument("--safe", action="store_true", help="choose the minimum-entropy head")
    mode.add_argument("--entropy-threshold", type=float, metavar="T",
                      help="early exit: shallowest head with entropy <= T, else the final head")
    pr.add_argument("--out-dir", help="write predictions.jsonl here instead of stdout")

    r = sub.add_parser("inspect-ratio", help="per-layer supervision ratios for a checkpoint")
    data_args(r)
    r.add_argument("--strategy", type=_strategy_list, default=list(STRATEGIES),
                   help="comma-separated strategies (default: all)")
    r.add_argument("--samples", type=int, default=128, help="batch size used for the measurement")
    r.add_argument("--seed", type=int, default=0, help="seed for drawing the batch")
    r.add_argument("--out-dir", default=".", help="directory for ratios.csv (default: %(default)s)")

    g = sub.add_parser("gradcheck", help="finite-difference certification of every layer kernel")
    g.add_argument("--shapes", type=int, default=20, help="random shapes per kernel")
    g.add_argument("--tolerance", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--kernel", action="append", choices=KERNELS, help="restrict to a kernel (repeatable)")
    return p


def _load_doc(path):
    try:
        return C.load(path)
    except OSError as e:
        raise CLIError(f"cannot read config {path}: {e.strerror}") from e


def _draw(x, y, n, seed):
    idx = np.random.default_rng(seed).permutation(len(x))[:max(2, n)]
    return x[idx], y[idx]


def cmd_train(args, parser):
    if not os.path.isfile(args.config):
        parser.error(f"config file not found: {args.config}")
    doc = _load_doc(args.config)
    base = os.path.dirname(os.path.abspath(args.config))
    spec = C.data_spec(doc)
    (xtr, ytr), (xte, yte) = load_dataset(spec, base)
    labels = np.concatenate([ytr, yte])
    data = {**doc.get("data", {}), "mean": spec.mean, "std": spec.std}
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        if data.get(key):
            data[key] = os.path.join(base, data[key])
    for key in ("train_files", "test_files"):
        if data.get(key):
            data[key] = [os.path.join(base, f) for f in data[key]]
    doc = dict(doc, data=data)
    resolved = C.resolve(doc, input_shape=list(xtr.shape[1:]), num_classes=int(labels.max()) + 1,
                         strategy=args.strategy, seed=args.seed, epochs=args.epochs)
    cfg = C.model_config(resolved)
    ts = C.train_spec(resolved)
    if labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise CLIError(f"labels span [{labels.min()}, {labels.max()}] but num_classes is {cfg.num_classes}")
    os.makedirs(args.out_dir, exist_ok=True)
    atomic_write(os.path.join(args.out_dir, "resolved_config.json"), C.dumps(resolved))

    model = N.build_model(cfg)
    writer = MetricsWriter(os.path.join(args.out_dir, "metrics.csv"), model.K + 1)
    ratio_batch = None
    if ts.ratio_samples > 0:
        # measured on held-out samples; the training split stands in when there is no test split
        rx, ry = (xte, yte) if len(xte) >= 2 else (xtr, ytr)
        ratio_batch = _draw(rx, ry, ts.ratio_samples, ts.seed)

    def on_epoch(row):
        writer.record_epoch(row)
        print(f"epoch {row.epoch:3d}  lr {row.lr:.4g}  final loss {row.train_loss[-1]:.4f}  "
              f"test err {' '.join(f'{e:.2f}' for e in row.test_err)}", flush=True)

    model, report = train(model, (xtr, ytr), ts.strategy, ts.epochs, ts.optim(), test_set=(xte, yte),
                          seed=ts.seed, on_epoch=on_epoch, ratio_batch=ratio_batch)
    ckpt = args.checkpoint or os.path.join(args.out_dir, "model.ckpt")
    save_checkpoint(model, ckpt, resolved)
    if ratio_batch is not None:
        traces = list(report.ratio_traces)
        for s in ts.ratio_strategies:
            if s != ts.strategy:
                traces.append(supervision_ratio(model, *ratio_batch, s, epoch=ts.epochs))
        export_ratio_csv(traces, os.path.join(args.out_dir, "ratios.csv"))
    print(f"wrote {ckpt}")
    return 0


def _eval_data(args, model, doc, need_labels):
    """Inputs (normalized like training) and labels for eval/predict."""
    if args.data:
        x, y = load_files(args.data, getattr(args, "labels", None))
        spec = DataSpec(**doc["data"]) if C.is_run_document(doc) else DataSpec(normalization="none")
        x = apply_normalization(x, spec.normalization, spec.mean, spec.std)
    else:
        if not C.is_run_document(doc):
            raise CLIError("checkpoint has no data section; pass --data")
        spec = DataSpec(**doc["data"])
        _, (x, y) = load_dataset(spec, os.getcwd())
    if tuple(x.shape[1:]) != tuple(model.config.input_shape):
        raise CLIError(f"data samples have shape {list(x.shape[1:])}, model expects {model.config.input_shape}")
    if need_labels and y is None:
        raise CLIError(f"no labels found for {args.data}; pass --labels")
    return x, y


def _load_model(path):
    if not os.path.isfile(path):
        raise CLIError(f"checkpoint not found: {path}")
    return load_checkpoint(path, with_document=True)


def cmd_eval(args, parser):
    model, doc = _load_model(args.checkpoint)
    x, y = _eval_data(args, model, doc, need_labels=True)
    ev = evaluate_heads(model, x, y)
    print(f"{'head':>4}  {'layer':>5}  {'test_err%':>9}  {'pred_ratio%':>11}")
    for k, h in enumerate(model.heads):
        print(f"{k + 1:>4}  {h.position:>5}  {ev.head_errors[k]:>9.2f}  {ev.prediction_ratio[k]:>11.2f}")
    print(f"safe prediction error: {ev.safe_error:.2f}%  (final head {ev.final_error:.2f}%, n={len(y)})")
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        out = {"samples": int(len(y)), "head_positions": [h.position for h in model.heads],
               "head_errors": ev.head_errors, "safe_error": ev.safe_error,
               "prediction_ratio": ev.prediction_ratio}
        atomic_write(os.path.join(args.out_dir, "eval.json"), json.dumps(out, indent=2) + "\n")
    return 0


def cmd_predict(args, parser):
    model, doc = _load_model(args.checkpoint)
    x, _ = _eval_data(args, model, doc, need_labels=False)
    if args.entropy_threshold is not None:
        pred = safe_predict(model, x, mode="threshold", threshold=args.entropy_threshold)
    else:
        pred = safe_predict(model, x, mode="safe" if args.safe else "final")
    lines = "".join(json.dumps(p.to_json_dict()) + "\n" for p in pred.samples())
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        atomic_write(os.path.join(args.out_dir, "predictions.jsonl"), lines)
    else:
        sys.stdout.write(lines)
    return 0


def cmd_inspect_ratio(args, parser):
    model, doc = _load_model(args.checkpoint)
    if args.data:
        x, y = _eval_data(args, model, doc, need_labels=True)
    else:
        if not C.is_run_document(doc):
            raise CLIError("checkpoint has no data section; pass --data")
        train_set, test_set = load_dataset(DataSpec(**doc["data"]), os.getcwd())
        x, y = test_set if len(test_set[0]) >= 2 else train_set
    xb, yb = _draw(x, y, args.samples, args.seed)
    epoch = doc.get("train", {}).get("epochs", 0) if C.is_run_document(doc) else 0
    traces = [supervision_ratio(model, xb, yb, s, epoch=epoch) for s in args.strategy]
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "ratios.csv")
    export_ratio_csv(traces, path)
    for t in traces:
        print(f"{t.strategy:>9}: " + " ".join(f"{r:.3g}" for r in t.ratios)
              + (f"  (flagged layers {t.flagged})" if t.flagged else ""))
    print(f"wrote {path}")
    return 0


def cmd_gradcheck(args, parser):
    reports = certify(n_shapes=args.shapes, tolerance=args.tolerance, seed=args.seed, kernels=args.kernel)
    worst = {}
    for r in reports:
        if r.kernel not in worst or not (r.max_rel_error <= worst[r.kernel].max_rel_error):
            worst[r.kernel] = r
    failed = [r for r in reports if not r.passed]
    for kernel, r in worst.items():
        n = sum(1 for q in reports if q.kernel == kernel)
        bad = sum(1 for q in failed if q.kernel == kernel)
        print(f"{kernel:>16}: {n - bad}/{n} shapes pass, max rel error {r.max_rel_error:.2e} "
              f"(tolerance {args.tolerance:g})")
    for r in failed:
        print(f"FAIL {r.kernel} {r.shape}: {r.max_rel_error:.3e}" + (f" ({r.error})" if r.error else ""))
    print("all kernels pass" if not failed else f"{len(failed)} checks failed")
    return 0 if not failed else 1


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "inspect-ratio": cmd_inspect_ratio, "gradcheck": cmd_gradcheck}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args, getattr(args, "subparser", parser))
    except BrokenPipeError:  # e.g. `auxnet predict ... | head`
        sys.stderr.close()
        return 0
    except (CLIError, CheckpointError, DataFormatError, TrainingDiverged, ValueError, OSError) as e:
        print(f"auxnet {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
