"""Command-line entry points for data generation, training, incremental
learning, evaluation, reporting, the EWC weight sweep, and plots.

Exit codes: 0 success, 2 config/usage error, 1 runtime error. All randomness
derives from the config plus the --seed flag.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .checkpoint import config_hash, load_checkpoint, load_into_model, model_state, save_checkpoint
from .config import load_config
from .errors import CheckpointError, ConfigError, DivergenceError, VocParseError
from .evaluation import evaluate_model, export_instance_features, forgetting_report
from .incremental import extend_model_head, incremental_train, make_ewc_state
from .model import IcodModel
from .plots import ap_bar_chart, feature_scatter_plots
from .reports import (
    read_feature_table,
    read_report,
    write_feature_table,
    write_forgetting_report,
    write_report,
)
from .trainer import build_model, train_model

DEFAULT_EWC_WEIGHTS = (0.0, 0.01, 0.1, 0.5)


def _out_dir(args):
    out = args.out or os.environ.get("ICOD_OUT_DIR")
    if not out:
        raise ConfigError("no output directory: pass --out or set ICOD_OUT_DIR")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _seed(args, cfg):
    return args.seed if args.seed is not None else cfg.seeds[0]


def _model_from_checkpoint(path, cfg):
    params, meta = load_checkpoint(path)
    model = IcodModel(meta["n_classes"], backbone_channels=tuple(meta["backbone_channels"]))
    model.inference_kind = meta.get("inference_kind", "F")
    load_into_model(model, params)
    return model, meta


def _checkpoint_meta(cfg, seed, model, step, mode):
    return {
        "n_classes": model.n_classes,
        "backbone_channels": list(cfg.backbone_channels),
        "seed": seed,
        "step": step,
        "mode": mode,
        "inference_kind": model.inference_kind,
        "config_hash": config_hash(cfg.to_dict()),
    }


def _eval_remap(cfg, n_classes):
    """Head-index remap consistent with how many classes the checkpoint has."""
    full = cfg.head_class_remap()
    if n_classes == len(full):
        return full
    old = sorted(cfg.old_classes) if cfg.scenario == "category_incremental" else cfg.all_classes
    if n_classes == len(old):
        return {c: i for i, c in enumerate(old)}
    raise ConfigError(f"checkpoint has {n_classes} classes; expected {len(old)} or {len(full)}")


def cmd_gen_data(args):
    cfg = load_config(args.config)
    out = _out_dir(args)
    for split, ds in cfg.datasets().items():
        (out / f"{split}_manifest.json").write_text(json.dumps(ds.manifest(), indent=2, sort_keys=True))
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    out = _out_dir(args)
    seed = _seed(args, cfg)
    datasets = cfg.datasets()
    n_classes = len(datasets["old_train"].task.class_ids)
    model = build_model(n_classes, seed, backbone_channels=tuple(cfg.backbone_channels))
    hyper = cfg.make_hyper(seed=seed)
    step_counter = {"n": 0}

    def on_epoch(epoch, m):
        save_checkpoint(
            model_state(m),
            _checkpoint_meta(cfg, seed, m, step_counter["n"], cfg.mode),
            out / f"epoch_{epoch:02d}",
        )

    with open(out / "train_log.jsonl", "w") as log_file:
        history = train_model(
            model, datasets["old_train"], hyper, mode=cfg.mode, log_file=log_file, epoch_callback=on_epoch
        )
        step_counter["n"] = len(history)
    save_checkpoint(
        model_state(model), _checkpoint_meta(cfg, seed, model, len(history), cfg.mode), out / "final"
    )
    return 0


def cmd_incremental(args):
    cfg = load_config(args.config)
    out = _out_dir(args)
    seed = _seed(args, cfg)
    datasets = cfg.datasets()
    model, meta = _model_from_checkpoint(args.checkpoint, cfg)
    strategy = cfg.make_strategy(seed=seed)
    remap = None
    if cfg.scenario == "category_incremental":
        extend_model_head(model, len(cfg.new_classes), seed)
        remap = cfg.head_class_remap()
    ewc_state = None
    if strategy.kind == "ewc":
        old_remap = _eval_remap(cfg, len(sorted(cfg.old_classes or cfg.classes)))
        ewc_state = make_ewc_state(
            model,
            datasets["old_train"],
            n_samples=min(len(datasets["old_train"]), 200),
            seed=seed,
            lam=strategy.lam,
            params=strategy.ewc_params,
            class_remap=None if cfg.scenario != "category_incremental" else old_remap,
        )
    with open(out / "train_log.jsonl", "w") as log_file:
        history = incremental_train(
            model, datasets["new_train"], strategy, ewc_state=ewc_state, class_remap=remap, log_file=log_file
        )
    save_checkpoint(
        model_state(model),
        _checkpoint_meta(cfg, seed, model, len(history), f"incremental/{strategy.kind}"),
        out / "final",
    )
    return 0


def cmd_eval(args):
    cfg = load_config(args.config)
    out = _out_dir(args)
    datasets = cfg.datasets()
    if args.split not in datasets:
        raise ConfigError(f"unknown split {args.split!r}; have {sorted(datasets)}")
    ds = datasets[args.split]
    model, meta = _model_from_checkpoint(args.checkpoint, cfg)
    remap = _eval_remap(cfg, model.n_classes)
    remap = {c: i for c, i in remap.items() if c in ds.task.class_ids}
    report = evaluate_model(
        model, ds, class_remap=remap, score_thresh=cfg.score_thresh, nms_iou=cfg.nms_iou, split=args.split
    )
    write_report(report, out / f"report_{args.split}")
    if args.bias_probe:
        flipped = evaluate_model(
            model,
            ds.flipped(),
            class_remap=remap,
            score_thresh=cfg.score_thresh,
            nms_iou=cfg.nms_iou,
            split=f"{args.split}_flipped",
        )
        write_report(flipped, out / f"report_{args.split}_flipped")
        delta = report.map_score - flipped.map_score
        (out / "bias_reliance.json").write_text(
            json.dumps({"split": args.split, "map": report.map_score, "map_flipped": flipped.map_score, "delta": delta}, indent=2)
        )
    if args.features:
        table = export_instance_features(
            model, ds, k_per_class=args.features_per_class, seed=cfg.base_seed, class_remap=remap
        )
        write_feature_table(table, out / "features.csv")
    return 0


def cmd_report(args):
    cfg = load_config(args.config)
    out = _out_dir(args)
    before = read_report(args.before)
    after = read_report(args.after)
    n_old = len(cfg.old_classes) if cfg.scenario == "category_incremental" else len(cfg.all_classes)
    old_ids = list(range(n_old))
    new_ids = list(range(n_old, len(cfg.all_classes)))
    result = forgetting_report(before, after, old_ids, new_ids)
    write_forgetting_report(result, out / "forgetting")
    return 0


def cmd_sweep_ewc(args):
    cfg = load_config(args.config)
    out = _out_dir(args)
    seed = _seed(args, cfg)
    weights = [float(w) for w in args.weights.split(",")] if args.weights else list(DEFAULT_EWC_WEIGHTS)
    datasets = cfg.datasets()
    base_model, meta = _model_from_checkpoint(args.checkpoint, cfg)
    remap = _eval_remap(cfg, base_model.n_classes)
    strategy = cfg.make_strategy(seed=seed)
    ewc_state = make_ewc_state(
        base_model,
        datasets["old_train"],
        n_samples=min(len(datasets["old_train"]), 200),
        seed=seed,
        lam=0.0,
        params=strategy.ewc_params,
    )
    before = evaluate_model(
        base_model, datasets["old_test"], class_remap=remap, score_thresh=cfg.score_thresh, nms_iou=cfg.nms_iou
    )
    rows = []
    for lam in weights:
        model, _ = _model_from_checkpoint(args.checkpoint, cfg)
        train_remap = None
        eval_remap = remap
        if cfg.scenario == "category_incremental":
            extend_model_head(model, len(cfg.new_classes), seed)
            train_remap = eval_remap = cfg.head_class_remap()
        spec = cfg.make_strategy(seed=seed)
        spec.kind = "ewc"
        spec.lam = lam
        incremental_train(model, datasets["new_train"], spec, ewc_state=ewc_state, class_remap=train_remap)
        old_rep = evaluate_model(
            model, datasets["old_test"], class_remap=eval_remap, score_thresh=cfg.score_thresh, nms_iou=cfg.nms_iou
        )
        new_rep = evaluate_model(
            model, datasets["new_test"], class_remap=eval_remap, score_thresh=cfg.score_thresh, nms_iou=cfg.nms_iou
        )
        rows.append(
            {
                "weight": lam,
                "old_map": old_rep.map_score,
                "new_map": new_rep.map_score,
                "old_map_before": before.map_score,
                "retention": old_rep.map_score / before.map_score if before.map_score > 0 else 0.0,
            }
        )
    (out / "sweep.json").write_text(json.dumps(rows, indent=2))
    with open(out / "sweep.csv", "w") as fh:
        fh.write("weight,old_map,new_map,retention\n")
        for r in rows:
            fh.write(f"{r['weight']},{r['old_map']:.6f},{r['new_map']:.6f},{r['retention']:.6f}\n")
    return 0


def cmd_plot(args):
    out = _out_dir(args)
    if args.features:
        table = read_feature_table(args.features)
        feature_scatter_plots(table, out)
    if args.before and args.after:
        ap_bar_chart(read_report(args.before), read_report(args.after), out / "ap_before_after.svg")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="icod", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", default=None, help="output directory (or ICOD_OUT_DIR)")
        p.add_argument("--seed", type=int, default=None)
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint directory")

    common(sub.add_parser("gen-data", help="write dataset manifests"))
    common(sub.add_parser("train", help="train the source-task model"))
    common(sub.add_parser("incremental", help="train on the new task from a checkpoint"), checkpoint=True)
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p_eval, checkpoint=True)
    p_eval.add_argument("--split", default="old_test")
    p_eval.add_argument("--bias-probe", action="store_true", help="also evaluate the bias-flipped split")
    p_eval.add_argument("--features", action="store_true", help="export instance feature table")
    p_eval.add_argument("--features-per-class", type=int, default=100)
    p_rep = sub.add_parser("report", help="forgetting report from two eval reports")
    common(p_rep)
    p_rep.add_argument("--before", required=True)
    p_rep.add_argument("--after", required=True)
    p_sweep = sub.add_parser("sweep-ewc", help="EWC weight sweep")
    common(p_sweep, checkpoint=True)
    p_sweep.add_argument("--weights", default=None, help="comma-separated EWC weights")
    p_plot = sub.add_parser("plot", help="render feature scatters and AP bars")
    p_plot.add_argument("--out", default=None)
    p_plot.add_argument("--features", default=None, help="feature table CSV")
    p_plot.add_argument("--before", default=None)
    p_plot.add_argument("--after", default=None)
    return parser


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "incremental": cmd_incremental,
    "eval": cmd_eval,
    "report": cmd_report,
    "sweep-ewc": cmd_sweep_ewc,
    "plot": cmd_plot,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return HANDLERS[args.command](args)
    except (ConfigError, VocParseError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (CheckpointError, DivergenceError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
