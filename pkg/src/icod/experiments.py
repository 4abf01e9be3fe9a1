"""Scenario scripts: bias-suppression, incremental-forgetting, and EWC-sweep
experiments assembled from the library pieces, seed by seed."""

from __future__ import annotations

import logging

from .datagen import BiasConfig, build_dataset
from .evaluation import bias_reliance, evaluate_model, forgetting_report
from .incremental import extend_model_head, incremental_train, make_ewc_state
from .trainer import build_model, train_model

log = logging.getLogger(__name__)


def bias_probe_dataset(cfg):
    """Fully bias-consistent (rho = 1) test scenes: every object carries its
    class signature, so the counterfactual flip moves each cue unambiguously."""
    bias = cfg.make_bias()
    return build_dataset(
        cfg.old_task(),
        BiasConfig(rho=1.0, bias_kind=bias.bias_kind, signatures=bias.signatures),
        cfg.n_test,
        cfg.base_seed + 1,
    )


def train_source(cfg, seed, mode=None, datasets=None):
    """Train one source-task model; returns (model, datasets)."""
    if datasets is None:
        datasets = cfg.datasets()
    n_classes = len(cfg.old_task().class_ids)
    model = build_model(n_classes, seed, backbone_channels=tuple(cfg.backbone_channels))
    train_model(model, datasets["old_train"], cfg.make_hyper(seed), mode=mode or cfg.mode)
    return model, datasets


def bias_suppression_experiment(cfg, seeds, probe=None):
    """Seed-matched baseline-vs-ICOD bias-reliance comparison.

    Returns per-seed rows {seed, baseline: {...}, icod: {...}, model} where
    model is the trained ICOD model (reused for feature analysis).
    """
    if probe is None:
        probe = bias_probe_dataset(cfg)
    datasets = cfg.datasets()
    rows = []
    for seed in seeds:
        row = {"seed": seed}
        for mode in ("baseline", "icod"):
            model, _ = train_source(cfg, seed, mode=mode, datasets=datasets)
            report = evaluate_model(model, probe, score_thresh=cfg.score_thresh, nms_iou=cfg.nms_iou)
            row[mode] = {
                "map": report.map_score,
                "reliance": bias_reliance(
                    model, probe, score_thresh=cfg.score_thresh, nms_iou=cfg.nms_iou
                ),
            }
            if mode == "icod":
                row["model"] = model
        log.info(
            "bias suppression seed %d: baseline %.3f, icod %.3f",
            seed, row["baseline"]["reliance"], row["icod"]["reliance"],
        )
        rows.append(row)
    return rows


def _eval_splits(cfg, model, datasets, remap):
    old = evaluate_model(
        model, datasets["old_test"], class_remap=remap, score_thresh=cfg.score_thresh,
        nms_iou=cfg.nms_iou, split="old_test",
    )
    new = evaluate_model(
        model, datasets["new_test"], class_remap=remap, score_thresh=cfg.score_thresh,
        nms_iou=cfg.nms_iou, split="new_test",
    )
    return old, new


def forgetting_experiment(cfg, seed, mode, strategy):
    """One source training + one incremental stage; returns the forgetting
    report plus before/after old-task mAP and new-task mAP."""
    model, datasets = train_source(cfg, seed, mode=mode)
    old_remap = {c: i for i, c in enumerate(sorted(cfg.old_task().class_ids))}
    before = evaluate_model(
        model, datasets["old_test"], class_remap=old_remap, score_thresh=cfg.score_thresh,
        nms_iou=cfg.nms_iou, split="old_test",
    )
    remap = old_remap
    if cfg.scenario == "category_incremental":
        extend_model_head(model, len(cfg.new_classes), seed)
        remap = cfg.head_class_remap()
    ewc_state = None
    if strategy.kind == "ewc":
        ewc_state = make_ewc_state(
            model, datasets["old_train"], n_samples=min(len(datasets["old_train"]), 200),
            seed=seed, lam=strategy.lam, params=strategy.ewc_params,
            class_remap=remap if cfg.scenario == "category_incremental" else None,
        )
    incremental_train(model, datasets["new_train"], strategy, ewc_state=ewc_state, class_remap=remap)
    after_old, after_new = _eval_splits(cfg, model, datasets, remap)
    old_ids = sorted(old_remap.values())
    new_ids = sorted(set(remap.values()) - set(old_ids)) if cfg.scenario == "category_incremental" else []
    merged_after = type(after_old)(
        per_class_ap={**after_old.per_class_ap, **{c: after_new.per_class_ap.get(c, 0.0) for c in new_ids}},
        map_score=after_old.map_score, n_images=after_old.n_images, iou_thresh=after_old.iou_thresh,
    )
    report = forgetting_report(before, merged_after, old_ids, new_ids)
    report["new_map"] = after_new.map_score
    report["model"] = model
    return report


def ewc_sweep_experiment(cfg, seed, weights, mode="icod"):
    """Table-5 analog: one source model, one incremental EWC run per weight.

    Returns rows {weight, old_map_before, old_map, new_map, retention}.
    """
    model, datasets = train_source(cfg, seed, mode=mode)
    remap = {c: i for i, c in enumerate(sorted(cfg.old_task().class_ids))}
    before = evaluate_model(
        model, datasets["old_test"], class_remap=remap, score_thresh=cfg.score_thresh,
        nms_iou=cfg.nms_iou, split="old_test",
    )
    strategy = cfg.make_strategy(seed=seed)
    anchor = {k: v.clone() for k, v in model.state_dict().items()}
    state = make_ewc_state(
        model, datasets["old_train"], n_samples=min(len(datasets["old_train"]), 200),
        seed=seed, lam=0.0, params=strategy.ewc_params,
    )
    rows = []
    for lam in weights:
        model.load_state_dict(anchor)
        spec = cfg.make_strategy(seed=seed)
        spec.kind = "ewc"
        spec.lam = lam
        state.lam = lam
        incremental_train(model, datasets["new_train"], spec, ewc_state=state)
        after_old, after_new = _eval_splits(cfg, model, datasets, remap)
        rows.append(
            {
                "weight": lam,
                "old_map_before": before.map_score,
                "old_map": after_old.map_score,
                "new_map": after_new.map_score,
                "retention": after_old.map_score / before.map_score if before.map_score > 0 else 0.0,
            }
        )
        log.info("ewc sweep seed %d weight %g: retention %.3f", seed, lam, rows[-1]["retention"])
    model.load_state_dict(anchor)
    return rows
