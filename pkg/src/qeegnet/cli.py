"""Command-line entry point: ``qeegnet {synth,train,eval,embed,complexity}``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime or numerical failure.
Progress goes to stderr; results go to files under the output directory and a
short summary to stdout.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import data as D
from .config import ExperimentConfig, default_config, load_config, parse_config
from .errors import (
    ArchitectureMismatchError, ConfigurationError, CorruptionError, FormatError, QEEGError,
    ShapeError, TrainingError, UnsupportedOperationError,
)
from .model import QEEGNET, EEGNET, build_model, complexity_report, time_forward
from .train import (
    Checkpoint, aggregate_reports, evaluate, load_checkpoint, metrics_from_confusion, save_checkpoint,
    train_loop, write_history,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
SPLITS = ("train", "val", "test", "all")


def progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _claim_outputs(paths: list[Path], overwrite: bool) -> None:
    """Fail before any work if an output exists and ``--overwrite`` is absent."""
    taken = [str(p) for p in paths if p.exists()]
    if taken and not overwrite:
        raise ConfigurationError(f"refusing to overwrite {', '.join(taken)} (pass --overwrite)")


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    raw = cfg.model_dump(mode="json")
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "model", None):
        raw["model"]["kind"] = args.model
    if getattr(args, "out", None):
        raw["output_dir"] = args.out
    return parse_config(raw)


# ---------------------------------------------------------------------------
# data preparation


def source_data(cfg: ExperimentConfig) -> D.EpochSet:
    """Load or synthesise the epochs, then band-pass and resample as configured."""
    if cfg.data.path is not None:
        path = Path(cfg.data.path)
        if not path.is_file():
            raise ConfigurationError(f"data file not found: {path}")
        x = D.load_epochs(path)
    else:
        x = D.synth_generate(cfg.data.synth.build(cfg.seed))
    return preprocess(x, cfg)


def preprocess(x: D.EpochSet, cfg: ExperimentConfig) -> D.EpochSet:
    if cfg.data.bandpass is not None:
        x = D.bandpass_filter(x, *cfg.data.bandpass)
    if cfg.data.resample is not None:
        x = D.resample(x, cfg.data.resample)
    return x


def fold_params(cfg: ExperimentConfig, x: D.EpochSet) -> list[dict]:
    base = dict(cfg.split.params)
    if not cfg.split.all_folds:
        return [base]
    protocol = cfg.split.protocol
    if protocol == D.LOSO:
        return [{**base, "held_out": s} for s in x.subjects()]
    if protocol == D.CROSS_SUBJECT:
        return [{**base, "target_subject": s} for s in x.subjects()]
    return [{**base, "fold": k} for k in range(int(base.get("n_folds", 4)))]


def _normalise(x: D.EpochSet, cfg: ExperimentConfig, train_idx) -> tuple[D.EpochSet, dict | None]:
    if not cfg.data.zscore:
        return x, None
    mean, std = D.zscore_stats(x, train_idx)
    return D.apply_zscore(x, mean, std), {"mean": mean.tolist(), "std": std.tolist()}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _experiment(args)
    if cfg.data.synth is None:
        raise ConfigurationError("synth needs a data.synth section")
    spec = cfg.data.synth.build(cfg.seed)
    out = Path(cfg.output_dir)
    target = out / "synth.qeeg"
    _claim_outputs([target, D.sidecar_path(target)], args.overwrite)
    x = D.synth_generate(spec)
    out.mkdir(parents=True, exist_ok=True)
    D.save_epochs(x, target)
    counts = ", ".join(f"class {k}: {v}" for k, v in enumerate(x.class_counts()))
    print(f"wrote {target}: {x.n_trials} trials, {x.n_classes} classes ({counts}), "
          f"{x.n_channels} channels x {x.n_samples} samples @ {x.sample_rate:g} Hz")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _experiment(args)
    kind = cfg.model.kind
    out = Path(cfg.output_dir)
    x_raw = source_data(cfg)
    model_cfg = cfg.model.build(x_raw.n_channels, x_raw.n_samples, x_raw.n_classes, x_raw.sample_rate)
    build_model(kind, model_cfg, seed=cfg.seed)  # fail fast on impossible geometry
    train_cfg = cfg.train.build(cfg.seed)
    split_seed = cfg.seed if cfg.split.seed is None else cfg.split.seed
    plans = [D.make_splits(x_raw, cfg.split.protocol, p, split_seed) for p in fold_params(cfg, x_raw)]
    for plan in plans:
        if plan.test_idx.size == 0 or plan.val_idx.size == 0 or plan.train_idx.size == 0:
            raise ConfigurationError(f"fold {plan.fold} has an empty train/val/test split")

    stems = [f"{kind}_fold{plan.fold}" for plan in plans]
    report_path = out / f"{kind}_report.json"
    outputs = [report_path] + [out / f"{s}{ext}" for s in stems for ext in (".qckp", "_history.csv")]
    _claim_outputs(outputs, args.overwrite)
    out.mkdir(parents=True, exist_ok=True)

    recorded = cfg.model_dump(mode="json", exclude={"output_dir"})
    folds, reports, by_subject = [], [], {}
    for plan, stem in zip(plans, stems):
        x, zscore = _normalise(x_raw, cfg, plan.train_idx)
        graph = build_model(kind, model_cfg, seed=cfg.seed)
        progress(f"[{kind}] fold {plan.fold}: {plan.train_idx.size} train / {plan.val_idx.size} val / "
                 f"{plan.test_idx.size} test trials, {graph.n_params()} parameters")

        def report_epoch(row, fold=plan.fold):
            progress(f"[{kind}] fold {fold} epoch {row['epoch']:>3}  train_loss {row['train_loss']:.4f}  "
                     f"val_loss {row['val_loss']:.4f}  val_acc {row['val_acc']:.2f}")

        extra = {"experiment": recorded, "split": plan.to_dict(), "zscore": zscore}
        result = train_loop(graph, x, plan, train_cfg, extra=extra, progress=report_epoch)
        save_checkpoint(result.best, out / f"{stem}.qckp")
        write_history(result.history, out / f"{stem}_history.csv")
        graph.load_state_dict(result.best.state)
        test = evaluate(graph, x, plan.test_idx)
        reports.append(test)
        for subj in np.unique(x.subject_ids[plan.test_idx]).tolist():
            cm = np.asarray(evaluate(graph, x, plan.test_idx[x.subject_ids[plan.test_idx] == subj]).confusion_matrix)
            by_subject[subj] = by_subject.get(subj, 0) + cm
        folds.append({"fold": plan.fold, "params": plan.params, "checkpoint": f"{stem}.qckp",
                      "best_epoch": result.best.epoch, "val_accuracy": result.best.val_accuracy,
                      "val_loss": result.best.val_loss, "test": test.to_dict()})
        print(f"{kind} fold {plan.fold}: test accuracy {test.accuracy:.2f}%  f1 {test.f1:.2f}  "
              f"precision {test.precision:.2f}  recall {test.recall:.2f}")

    report = {"model": kind, "protocol": cfg.split.protocol, "seed": cfg.seed, "folds": folds,
              "aggregate": aggregate_reports(reports, [f["fold"] for f in folds]),
              # confusion matrices pooled per test subject across folds, then spread across subjects
              "aggregate_by_subject": aggregate_reports([metrics_from_confusion(cm) for cm in by_subject.values()],
                                                        list(by_subject))}
    _write_json(report_path, report)
    agg = report["aggregate"]["accuracy"]
    print(f"{kind}: accuracy {agg['mean']:.2f} +/- {agg['std']:.2f} over {len(folds)} fold(s); report {report_path}")
    return EXIT_OK


def _checkpoint_data(ckpt: Checkpoint, data_path: str | None) -> tuple[D.EpochSet, ExperimentConfig]:
    recorded = ckpt.extra.get("experiment")
    if recorded is None:
        raise ConfigurationError("checkpoint carries no experiment record; pass --config")
    cfg = parse_config({**recorded, "output_dir": "."})
    if data_path is not None:
        path = Path(data_path)
        if not path.is_file():
            raise ConfigurationError(f"data file not found: {path}")
        x = preprocess(D.load_epochs(path), cfg)
    else:
        x = source_data(cfg)
    zscore = ckpt.extra.get("zscore")
    if zscore is not None:
        if len(zscore["mean"]) != x.n_channels:
            raise ConfigurationError(
                f"data has {x.n_channels} channels; checkpoint expects {len(zscore['mean'])}")
        x = D.apply_zscore(x, zscore["mean"], zscore["std"])
    mc = ckpt.architecture["config"]
    expected, got = (mc["n_channels"], mc["n_samples"]), (x.n_channels, x.n_samples)
    if expected != got:
        raise ConfigurationError(f"data shape (channels, samples) {got} != checkpoint input {expected}")
    return x, cfg


def _select(ckpt: Checkpoint, x: D.EpochSet, split: str) -> np.ndarray:
    if split == "all":
        return np.arange(x.n_trials)
    plan = ckpt.extra.get("split")
    if plan is None:
        raise ConfigurationError("checkpoint carries no split record; use --split all")
    idx = np.asarray(plan[split], dtype=np.int64)
    if idx.size and (idx.max() >= x.n_trials):
        raise ConfigurationError(f"recorded {split} indices exceed the {x.n_trials} trials in the data")
    return idx


def _open_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args) -> int:
    ckpt = _open_checkpoint(args.checkpoint)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    target = out / f"{Path(args.checkpoint).stem}_{args.split}_metrics.json"
    _claim_outputs([target], args.overwrite)
    x, _ = _checkpoint_data(ckpt, args.data)
    idx = _select(ckpt, x, args.split)
    if idx.size == 0:
        raise ConfigurationError(f"the {args.split} split is empty")
    graph = ckpt.build_model()
    report = evaluate(graph, x, idx)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(target, {"checkpoint": Path(args.checkpoint).name, "split": args.split, "model": graph.kind,
                         "epoch": ckpt.epoch, **report.to_dict()})
    print(f"{graph.kind} {args.split}: accuracy {report.accuracy:.2f}%  f1 {report.f1:.2f}  "
          f"precision {report.precision:.2f}  recall {report.recall:.2f}  ({report.n_trials} trials) -> {target}")
    return EXIT_OK


def cmd_embed(args) -> int:
    ckpt = _open_checkpoint(args.checkpoint)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    target = out / f"{Path(args.checkpoint).stem}_{args.split}_embed.csv"
    _claim_outputs([target], args.overwrite)
    x, _ = _checkpoint_data(ckpt, args.data)
    idx = _select(ckpt, x, args.split)
    if idx.size == 0:
        raise ConfigurationError(f"the {args.split} split is empty")
    graph = ckpt.build_model()
    feats = np.concatenate([
        graph.forward(np.asarray(x.epochs[idx[i:i + 256]], dtype=np.float64), training=False,
                      upto=graph.feature_layer)
        for i in range(0, idx.size, 256)
    ])
    out.mkdir(parents=True, exist_ok=True)
    with open(target, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "label", "subject"] + [f"e{k}" for k in range(feats.shape[1])])
        for i, row in zip(idx, feats):
            w.writerow([int(i), int(x.labels[i]), int(x.subject_ids[i])] + [repr(float(v)) for v in row])
    print(f"wrote {target}: {idx.size} trials x {feats.shape[1]} {graph.feature_layer} features")
    return EXIT_OK


def cmd_complexity(args) -> int:
    cfg = _experiment(args)
    synth = cfg.data.synth
    C = args.channels or (synth.n_channels if synth else None)
    T = args.samples or (synth.n_samples if synth else None)
    fs = synth.sample_rate if synth else 128.0
    if C is None or T is None:
        raise ConfigurationError("pass --channels and --samples (no synthetic data section to read them from)")
    model_cfg = cfg.model.build(C, T, synth.n_classes if synth else 2, fs)
    K = args.K if args.K is not None else model_cfg.temporal_kernel
    M = args.M if args.M is not None else model_cfg.pointwise_filters
    n = args.n if args.n is not None else (cfg.model.n_qubits if cfg.model.kind == QEEGNET else 0)
    if min(C, T, K, M) < 1 or n < 0:
        raise ConfigurationError("complexity arguments must be positive")
    report = complexity_report(model_cfg, K, M, n)
    if args.repeats > 0:
        timing = {"eegnet_forward_s": time_forward(build_model(EEGNET, model_cfg, cfg.seed), args.repeats)}
        if n > 0:
            qcfg = cfg.model.model_copy(update={"kind": QEEGNET, "n_qubits": n}).build(
                C, T, model_cfg.n_classes, fs)
            timing["qeegnet_forward_s"] = time_forward(build_model(QEEGNET, qcfg, cfg.seed), args.repeats)
            timing["ratio"] = timing["qeegnet_forward_s"] / timing["eegnet_forward_s"]
        report.timing = timing
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True) if args.json else report.format())
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qeegnet", description="Hybrid classical/quantum EEG classifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True):
        p.add_argument("--config", help="experiment YAML file")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        if model:
            p.add_argument("--model", choices=(EEGNET, QEEGNET), help="override model.kind")
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")

    p = sub.add_parser("synth", help="write a synthetic epoch file")
    common(p, model=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and write checkpoints, history and a test report")
    common(p)
    p.set_defaults(func=cmd_train)

    for name, func, default_split, help_ in (("eval", cmd_eval, "test", "score a checkpoint"),
                                             ("embed", cmd_embed, "all", "export feature embeddings")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="epoch file (default: the data recorded in the checkpoint)")
        p.add_argument("--split", choices=SPLITS, default=default_split)
        p.add_argument("--out", help="output directory (default: next to the checkpoint)")
        p.add_argument("--overwrite", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("complexity", help="operation counts and measured forward time")
    common(p)
    p.add_argument("--channels", "-C", type=int)
    p.add_argument("--samples", "-T", type=int)
    p.add_argument("-K", type=int, help="temporal kernel length (default: from the model)")
    p.add_argument("-M", type=int, help="pointwise filters (default: from the model)")
    p.add_argument("-n", type=int, help="qubits (default: from the model; 0 drops the quantum term)")
    p.add_argument("--repeats", type=int, default=10, help="timed forward passes (0 skips timing)")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_complexity)
    return parser


def _thread_limit():
    raw = os.environ.get("QEEG_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"QEEG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError(f"QEEG_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigurationError, ShapeError, ArchitectureMismatchError, FormatError, CorruptionError,
            UnsupportedOperationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (QEEGError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
