"""Command line entry point: generate, train, audit, posttrain, metrics.

Every option can also come from a JSON config file (--config); explicit flags
win over the file, the file wins over built-in defaults. All randomness is
derived from --seed, one generator per stage, so reruns with the same arguments
rebuild identical artifacts. The LABELSIFT_OUT environment variable supplies
the default parent directory for outputs.

Exit codes: 0 success, 2 usage, 3 missing input file, 4 bad data format,
5 invalid value or shape mismatch, 6 bad config file, 1 anything else.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np
from sklearn.exceptions import NotFittedError

from . import data as d
from .influence import DEFAULT_CG_TOL, DEFAULT_DAMPING
from .network import FeedforwardClassifier
from .posttrain import (
    AuditReport,
    PostTrainConfig,
    detection_metrics,
    final_retrain,
    post_train,
    refine_labels,
    small_loss_select,
)
from .scoring import SelectionConfig, compute_score_table, zscore

OUT_ENV = "LABELSIFT_OUT"


class ConfigError(ValueError):
    """Bad --config file: unreadable, not an object, or unknown keys."""


def stage_seed(seed: int, stage: str) -> int:
    """Deterministic per-stage seed derived from the global seed by stage name."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _default_out(explicit: str | None, name: str) -> str:
    if explicit:
        return explicit
    root = os.environ.get(OUT_ENV)
    return os.path.join(root, name) if root else name


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return doc


def _merge(args: argparse.Namespace, defaults: dict) -> argparse.Namespace:
    """Apply flag > config-file > default precedence for every known option."""
    config = _load_config(getattr(args, "config", None))
    unknown = set(config) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, fallback in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, config.get(key, fallback))
    return args


def _parse_hidden(value) -> tuple[int, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    if isinstance(value, int):
        return (value,)
    value = str(value).strip()
    if not value or value == "none":
        return ()
    return tuple(int(v) for v in value.split(","))

def _parse_lr_drops(value) -> tuple[tuple[int, float], ...]:
    if value is None:
        return ()
    drops = []
    for item in value:
        if isinstance(item, str):
            epoch, factor = item.split(":")
            drops.append((int(epoch), float(factor)))
        else:
            drops.append((int(item[0]), float(item[1])))
    return tuple(drops)


def _require_file(path: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"input not found: {path}")
    return path


# -- run directory layout ------------------------------------------------------------


def _run_paths(run_dir: str) -> dict:
    return {
        "train": os.path.join(run_dir, "train.csv"),
        "val": os.path.join(run_dir, "val.csv"),
        "manifest": os.path.join(run_dir, "manifest.json"),
        "checkpoint": os.path.join(run_dir, "checkpoint.json"),
        "metrics": os.path.join(run_dir, "metrics.json"),
    }


def _load_run(run_dir: str):
    paths = _run_paths(_require_file(run_dir))
    for key in ("train", "val", "manifest", "checkpoint"):
        _require_file(paths[key])
    doc = d.read_manifest(paths["manifest"])
    k = doc["num_classes"]
    train = d.load_csv(paths["train"], n_classes=k)
    val_ds = d.load_csv(paths["val"], n_classes=k)
    val = d.ValidationSet(val_ds.ids, val_ds.X, val_ds.y, k)
    clf = FeedforwardClassifier.load(paths["checkpoint"])
    if clf.n_features_in_ != train.feature_dim:
        raise ValueError(
            f"checkpoint expects {clf.n_features_in_} features, data has {train.feature_dim}"
        )
    spec = doc.get("noise_spec")
    noise = d.NoiseSpec.from_dict(spec) if spec else None
    return train, val, clf, noise


# -- generate -----------------------------------------------------------------------

GENERATE_DEFAULTS = {
    "n": 100,
    "classes": 4,
    "per_class": 100,
    "dim": 2,
    "separation": 10.0,
    "noise": 0.0,
    "seed": 0,
    "out": None,
}


def cmd_generate(args: argparse.Namespace) -> int:
    args = _merge(args, GENERATE_DEFAULTS)
    out_dir = _default_out(args.out, "dataset")
    os.makedirs(out_dir, exist_ok=True)
    if args.kind == "toy":
        ds = d.generate_toy(int(args.n), seed=stage_seed(args.seed, "generate"))
    else:
        ds = d.generate_blobs(
            int(args.per_class),
            int(args.classes),
            n_features=int(args.dim),
            separation=float(args.separation),
            seed=stage_seed(args.seed, "generate"),
        )
    spec = None
    if args.noise > 0:
        spec = d.NoiseSpec(ratio=float(args.noise), seed=stage_seed(args.seed, "noise"))
        ds = d.inject_noise(ds, spec)
    csv_path = os.path.join(out_dir, "dataset.csv")
    d.save_csv(ds, csv_path)
    d.write_manifest(os.path.join(out_dir, "manifest.json"), ds, "dataset.csv", spec)
    flipped = int(ds.flipped_mask().sum())
    print(f"wrote {len(ds)} samples ({flipped} flipped) to {csv_path}")
    return 0


# -- train --------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "data": None,
    "hidden": "50",
    "epochs": 100,
    "lr": 0.1,
    "lr_drop": None,
    "momentum": 0.9,
    "batch_size": 32,
    "val_per_class": 5,
    "standardize": False,
    "seed": 0,
    "out": None,
}


def cmd_train(args: argparse.Namespace) -> int:
    args = _merge(args, TRAIN_DEFAULTS)
    if not args.data:
        raise ValueError("--data is required")
    ds, noise = d.load_dataset(_require_file(args.data))
    train, val = d.split_validation(
        ds, m=int(args.val_per_class), seed=stage_seed(args.seed, "split")
    )
    clf = FeedforwardClassifier(
        hidden_layer_sizes=_parse_hidden(args.hidden),
        epochs=int(args.epochs),
        learning_rate=float(args.lr),
        lr_drops=_parse_lr_drops(args.lr_drop),
        momentum=float(args.momentum),
        batch_size=int(args.batch_size),
        n_classes=ds.n_classes,
        standardize=bool(args.standardize),
        random_state=stage_seed(args.seed, "train"),
    )
    clf.fit(train.X, train.y)
    out_dir = _default_out(args.out, "run")
    os.makedirs(out_dir, exist_ok=True)
    paths = _run_paths(out_dir)
    d.save_csv(train, paths["train"])
    val_ds = d.LabeledDataset(val.ids, val.X, val.y, ds.n_classes, y_true=np.array(val.y))
    d.save_csv(val_ds, paths["val"])
    d.write_manifest(paths["manifest"], train, "train.csv", noise)
    clf.save(paths["checkpoint"])
    metrics = {
        "train_accuracy": clf.accuracy(train.X, train.y),
        "val_accuracy": clf.accuracy(val.X, val.y),
        "n_train": len(train),
        "n_val": len(val),
        "epochs": int(args.epochs),
        "final_train_loss": clf.loss_curve_[-1] if clf.loss_curve_ else None,
    }
    with open(paths["metrics"], "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2)
        fh.write("\n")
    print(
        f"trained on {len(train)} samples: train acc {metrics['train_accuracy']:.3f}, "
        f"val acc {metrics['val_accuracy']:.3f} -> {out_dir}"
    )
    return 0


# -- audit --------------------------------------------------------------------------

AUDIT_DEFAULTS = {
    "run": None,
    "selector": "influence",
    "gamma": None,
    "noise_ratio": None,
    "osd_normalization": "candidates",
    "damping": DEFAULT_DAMPING,
    "cg_tol": DEFAULT_CG_TOL,
    "hessian_sample": None,
    "threads": 1,
    "seed": 0,
    "ground_truth": False,
    "dump_influence": False,
    "out": None,
}


def _selection_config(args, val, noise) -> SelectionConfig:
    declared = args.noise_ratio
    if declared is None and noise is not None:
        declared = noise.ratio
    return SelectionConfig(
        gamma=None if args.gamma is None else int(args.gamma),
        m_per_class=val.m,
        noise_ratio=declared,
        osd_normalization=args.osd_normalization,
        gmm_seed=stage_seed(args.seed, "gmm"),
    )


def _summarize_selection(selected_ids, train: d.LabeledDataset) -> dict:
    doc: dict = {"n_selected": len(selected_ids), "selected_ids": [int(i) for i in selected_ids]}
    if train.y_true is not None:
        flipped = train.flipped_mask()
        selected_mask = np.isin(train.ids, selected_ids)
        hits = int((selected_mask & flipped).sum())
        precision = hits / selected_mask.sum() if selected_mask.any() else None
        recall = hits / flipped.sum() if flipped.any() else None
        f1 = None
        if precision and recall and precision + recall > 0:
            f1 = 2 * precision * recall / (precision + recall)
        elif precision is not None and recall is not None:
            f1 = 0.0
        doc.update(
            n_flipped=int(flipped.sum()),
            precision=precision,
            recall=recall,
            f1=f1,
            remaining_noise_ratio=detection_metrics(selected_ids, train)[1],
        )
    return doc


def cmd_audit(args: argparse.Namespace) -> int:
    args = _merge(args, AUDIT_DEFAULTS)
    if not args.run:
        raise ValueError("--run is required")
    train, val, clf, noise = _load_run(args.run)
    out_csv = args.out or os.path.join(args.run, "scores.csv")
    os.makedirs(os.path.dirname(out_csv) or ".", exist_ok=True)
    config = _selection_config(args, val, noise)
    if args.selector == "small-loss":
        selected_ids = small_loss_select(clf, train, config)
        losses = clf.per_sample_loss(train.X, train.y)
        z = zscore(losses)
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "loss", "zloss", "selected"])
            sel = set(int(i) for i in selected_ids)
            for i, sid in enumerate(train.ids):
                writer.writerow([int(sid), repr(float(losses[i])), repr(float(z[i])),
                                 int(int(sid) in sel)])
        summary = {"selector": "small-loss", **_summarize_selection(selected_ids, train)}
    elif args.selector == "influence":
        table = compute_score_table(
            clf,
            train,
            val,
            config=config,
            damping=float(args.damping),
            cg_tol=float(args.cg_tol),
            hessian_sample_size=args.hessian_sample,
            seed=stage_seed(args.seed, "audit"),
            threads=int(args.threads),
            keep_i_d=bool(args.dump_influence),
        )
        k = train.n_classes
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "osm", *[f"osd_k{j}" for j in range(k)], "votes", "selected"])
            writer.writerows(table.rows())
        if args.dump_influence:
            base = os.path.splitext(out_csv)[0]
            with open(base + "_model.csv", "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["train_id", "norm_im", "cg_residual"])
                for i, sid in enumerate(table.ids):
                    writer.writerow([int(sid), repr(float(table.influence_norms[i])),
                                     repr(float(table.cg_residuals[i]))])
            with open(base + "_data.csv", "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["train_id", "val_id", "i_d"])
                for row, tid in enumerate(table.candidate_ids):
                    for col, vid in enumerate(val.ids):
                        writer.writerow([int(tid), int(vid), repr(float(table.i_d[row, col]))])
        summary = {
            "selector": "influence",
            "gamma": table.gamma,
            "n_candidates": int(table.candidate_mask.sum()),
            **_summarize_selection(table.selected_ids, train),
        }
    else:
        raise ValueError(f"unknown selector {args.selector!r}")
    if not args.ground_truth:
        for key in ("precision", "recall", "f1", "n_flipped", "remaining_noise_ratio"):
            summary.pop(key, None)
    summary_path = os.path.splitext(out_csv)[0] + "_summary.json"
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    line = f"audit ({summary['selector']}): selected {summary['n_selected']} of {len(train)}"
    if args.ground_truth and summary.get("precision") is not None:
        line += f", precision {summary['precision']:.3f}"
    print(line + f" -> {out_csv}")
    return 0


# -- posttrain ----------------------------------------------------------------------

POSTTRAIN_DEFAULTS = {
    "run": None,
    "rounds": 3,
    "epochs": 20,
    "saturation_delta": 0.1,
    "selector": "influence",
    "gamma": None,
    "noise_ratio": None,
    "osd_normalization": "candidates",
    "damping": DEFAULT_DAMPING,
    "cg_tol": DEFAULT_CG_TOL,
    "hessian_sample": None,
    "threads": 1,
    "refine": False,
    "refine_threshold": 0.8,
    "seed": 0,
    "out": None,
}


def _write_rounds_csv(path: str, report: AuditReport, initial_noise: float | None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "acc", "noise_ratio", "removed"])
        fmt = lambda v: "" if v is None else repr(float(v))
        writer.writerow([0, repr(float(report.initial_accuracy)), fmt(initial_noise), 0])
        for r in report.rounds:
            acc = r.accuracy_after if r.committed else r.accuracy_before
            writer.writerow([r.round_index, repr(float(acc)),
                             fmt(r.remaining_noise_ratio), len(r.removed_ids)])


def cmd_posttrain(args: argparse.Namespace) -> int:
    args = _merge(args, POSTTRAIN_DEFAULTS)
    if not args.run:
        raise ValueError("--run is required")
    train, val, clf, noise = _load_run(args.run)
    out_dir = args.out or os.path.join(args.run, "posttrain")
    os.makedirs(out_dir, exist_ok=True)
    config = PostTrainConfig(
        epochs=int(args.epochs),
        max_rounds=int(args.rounds),
        saturation_delta=float(args.saturation_delta),
        refine_threshold=float(args.refine_threshold),
        selector=args.selector,
        selection=_selection_config(args, val, noise),
        damping=float(args.damping),
        cg_tol=float(args.cg_tol),
        hessian_sample_size=args.hessian_sample,
        threads=int(args.threads),
        seed=stage_seed(args.seed, "posttrain"),
    )
    artifacts = {}

    def save_round(round_report, model):
        if round_report.committed:
            name = f"checkpoint_round_{round_report.round_index}.json"
            model.save(os.path.join(out_dir, name))
            artifacts[f"round_{round_report.round_index}"] = name

    final, report = post_train(clf, train, val, config, round_hook=save_round)
    final_path = os.path.join(out_dir, "final.checkpoint.json")
    final.save(final_path)
    report.model_path = final_path
    artifacts["final"] = "final.checkpoint.json"
    clean = train.select_ids(np.array(report.final_clean_ids, dtype=np.int64))
    removed = train.remove_ids(np.array(report.final_clean_ids, dtype=np.int64))
    d.save_csv(clean, os.path.join(out_dir, "clean.csv"))
    d.save_csv(removed, os.path.join(out_dir, "removed.csv"))
    artifacts["clean"] = "clean.csv"
    artifacts["removed"] = "removed.csv"
    if args.refine:
        kept, _discarded = refine_labels(final, removed, float(args.refine_threshold))
        refined = clean.concat(kept) if len(kept) else clean
        refined_path = os.path.join(out_dir, "refined.csv")
        d.save_csv(refined, refined_path)
        report.refined_data_path = refined_path
        artifacts["refined"] = "refined.csv"
        retrained = final_retrain(refined, clf, seed=stage_seed(args.seed, "final-retrain"))
        retrained.save(os.path.join(out_dir, "final_refined.checkpoint.json"))
        artifacts["final_refined"] = "final_refined.checkpoint.json"
        report.refinement = {
            "relabeled": len(kept),
            "discarded": len(removed) - len(kept),
            "refined_train_size": len(refined),
            "refined_val_accuracy": retrained.accuracy(val.X, val.y),
        }
    _write_rounds_csv(
        os.path.join(out_dir, "rounds.csv"),
        report,
        train.noise_ratio() if train.has_true_labels else None,
    )
    artifacts["rounds"] = "rounds.csv"
    artifacts["report"] = "report.json"
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump({"artifacts": artifacts}, fh, indent=2)
        fh.write("\n")
    print(
        f"post-training: {report.committed_rounds} committed rounds, "
        f"removed {len(report.removed_ids)} samples, "
        f"val acc {report.initial_accuracy:.3f} -> {report.final_accuracy:.3f} -> {out_dir}"
    )
    return 0


# -- metrics ------------------------------------------------------------------------

METRICS_DEFAULTS = {
    "data": None,
    "scores": None,
    "ids": None,
    "out": None,
}


def _read_selected_ids(args) -> np.ndarray:
    if args.scores:
        with open(_require_file(args.scores), "r", newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "id" not in reader.fieldnames \
                    or "selected" not in reader.fieldnames:
                raise d.DataFormatError(f"{args.scores}: need id and selected columns")
            return np.array(
                [int(row["id"]) for row in reader if int(row["selected"])], dtype=np.int64
            )
    if args.ids:
        with open(_require_file(args.ids), "r", encoding="utf-8") as fh:
            return np.array([int(line) for line in fh if line.strip()], dtype=np.int64)
    raise ValueError("one of --scores or --ids is required")


def cmd_metrics(args: argparse.Namespace) -> int:
    args = _merge(args, METRICS_DEFAULTS)
    if not args.data:
        raise ValueError("--data is required")
    ds, _noise = d.load_dataset(_require_file(args.data))
    if ds.y_true is None:
        raise ValueError("dataset has no true_label column; metrics need ground truth")
    selected = _read_selected_ids(args)
    precision, remaining = detection_metrics(selected, ds)
    doc = {
        "n_total": len(ds),
        "n_removed": int(len(selected)),
        "precision": precision,
        "remaining_noise_ratio": remaining,
    }
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
    precision_str = "n/a" if precision is None else f"{precision:.3f}"
    print(f"precision {precision_str}, remaining noise {remaining:.3f}")
    return 0


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="labelsift",
        description="Detect mislabeled training samples with influence scores "
        "and repair the model by post-training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON file with option defaults")
        p.add_argument("--seed", type=int, help="global seed (default 0)")
        p.add_argument("--out", help=f"output location (default from ${OUT_ENV})")

    p = sub.add_parser("generate", help="write a dataset CSV and manifest")
    p.add_argument("kind", choices=["toy", "blobs"])
    p.add_argument("--n", type=int, help="toy: number of samples")
    p.add_argument("--classes", type=int, help="blobs: number of classes")
    p.add_argument("--per-class", type=int, dest="per_class", help="blobs: samples per class")
    p.add_argument("--dim", type=int, help="blobs: feature dimension")
    p.add_argument("--separation", type=float, help="blobs: cluster separation")
    p.add_argument("--noise", type=float, help="symmetric label noise ratio")
    add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="split validation, train, write a run directory")
    p.add_argument("--data", help="dataset dir, manifest, or CSV")
    p.add_argument("--hidden", help="hidden layer sizes, e.g. 50 or 50,16")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-drop", action="append", dest="lr_drop", metavar="EPOCH:FACTOR")
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--val-per-class", type=int, dest="val_per_class")
    p.add_argument("--standardize", action="store_const", const=True,
                   help="scale inputs to zero mean, unit variance")
    add_common(p)
    p.set_defaults(func=cmd_train)

    def add_audit_opts(p):
        p.add_argument("--run", help="run directory from `labelsift train`")
        p.add_argument("--selector", choices=["influence", "small-loss"])
        p.add_argument("--gamma", type=int)
        p.add_argument("--noise-ratio", type=float, dest="noise_ratio",
                       help="declared noise ratio (default: from the manifest)")
        p.add_argument("--osd-normalization", choices=["candidates", "classes"],
                       dest="osd_normalization")
        p.add_argument("--damping", type=float)
        p.add_argument("--cg-tol", type=float, dest="cg_tol")
        p.add_argument("--hessian-sample", type=int, dest="hessian_sample")
        p.add_argument("--threads", type=int, help="scoring fan-out only")

    p = sub.add_parser("audit", help="score the training data of a run")
    add_audit_opts(p)
    p.add_argument("--ground-truth", action="store_const", const=True, dest="ground_truth",
                   help="report precision/recall against true labels")
    p.add_argument("--dump-influence", action="store_const", const=True, dest="dump_influence",
                   help="also write raw influence norms and pairwise values")
    add_common(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("posttrain", help="iterative removal and retraining")
    add_audit_opts(p)
    p.add_argument("--rounds", type=int, help="max rounds")
    p.add_argument("--epochs", type=int, help="retraining epochs per round")
    p.add_argument("--saturation-delta", type=float, dest="saturation_delta",
                   help="min val-accuracy gain (points) to commit a round")
    p.add_argument("--refine", action="store_const", const=True,
                   help="relabel confident removed samples and retrain fresh")
    p.add_argument("--refine-threshold", type=float, dest="refine_threshold")
    add_common(p)
    p.set_defaults(func=cmd_posttrain)

    p = sub.add_parser("metrics", help="precision and remaining noise of a selection")
    p.add_argument("--data", help="dataset with a true_label column")
    p.add_argument("--scores", help="scores CSV with id and selected columns")
    p.add_argument("--ids", help="text file with one removed id per line")
    add_common(p)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 6
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except d.DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ValueError, NotFittedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except Exception as exc:  # pragma: no cover - last resort
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
