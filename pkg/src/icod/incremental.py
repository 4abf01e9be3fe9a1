"""Incremental strategies over a trained model: finetune, freeze-backbone, EWC.

EWC uses the empirical Fisher (mean squared detection-loss gradients at the
old-task optimum). By default the penalty anchors backbone + decomposer and
leaves the head plastic; "all" mirrors a plain whole-model sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .detector import Head, detection_loss, stack_targets
from .errors import ConfigError
from .model import prepare_batches
from .trainer import HyperParams, train_model

EWC_PARAM_SUBSETS = ("backbone_decomposer", "all")


@dataclass
class EWCState:
    theta_star: dict  # name -> tensor snapshot
    fisher: dict  # name -> non-negative tensor, same shapes
    lam: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"EWC weight must be >= 0, got {self.lam}")
        for name, f in self.fisher.items():
            if f.shape != self.theta_star[name].shape:
                raise ConfigError(f"fisher/theta_star shape mismatch for {name}")


@dataclass
class StrategySpec:
    kind: str  # finetune | freeze_backbone | ewc
    hyper: HyperParams = field(default_factory=HyperParams)
    lam: float = 0.0
    ewc_params: str = "backbone_decomposer"
    new_classes: tuple = ()

    def __post_init__(self):
        if self.kind not in ("finetune", "freeze_backbone", "ewc"):
            raise ConfigError(f"unknown strategy kind {self.kind!r}")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.ewc_params not in EWC_PARAM_SUBSETS:
            raise ConfigError(f"unknown ewc_params {self.ewc_params!r}")


def compute_fisher(model, dataset, n_samples, seed, class_remap=None):
    """Diagonal empirical Fisher: mean over sampled images of squared grad of L_d.

    Sampling draws indices sequentially from a seeded stream, so a longer run
    shares its prefix with a shorter one.
    """
    if len(dataset) == 0 or n_samples < 1:
        raise ConfigError("fisher estimation needs a non-empty dataset and n_samples >= 1")
    torch.set_num_threads(1)
    images, targets = prepare_batches(dataset, model.stride, model.n_classes, class_remap)
    gen = torch.Generator().manual_seed(seed)
    fisher = {name: torch.zeros_like(p) for name, p in model.named_parameters()}
    for _ in range(n_samples):
        i = int(torch.randint(len(dataset), (1,), generator=gen))
        model.zero_grad()
        _, _, ld = detection_loss(model(images[i : i + 1]), stack_targets([targets[i]]), model.n_classes)
        ld.backward()
        for name, p in model.named_parameters():
            if p.grad is not None:
                fisher[name] += p.grad.detach() ** 2
    model.zero_grad()
    return {name: f / n_samples for name, f in fisher.items()}


def make_ewc_state(model, dataset, n_samples, seed, lam, params="backbone_decomposer", class_remap=None):
    """Snapshot anchors + Fisher for the chosen parameter subset.

    The Fisher diagonal is normalized to mean 1 over the anchored entries:
    raw squared gradients at the old-task optimum are vanishingly small, which
    would make any practical lam a no-op. Normalizing makes lam a scale-free
    knob (relative curvature weighting is untouched).
    """
    fisher = compute_fisher(model, dataset, n_samples, seed, class_remap)
    if params == "backbone_decomposer":
        keep = lambda name: not name.startswith("head.")
    elif params == "all":
        keep = lambda name: True
    else:
        raise ConfigError(f"unknown ewc params subset {params!r}")
    theta_star = {n: p.detach().clone() for n, p in model.named_parameters() if keep(n)}
    kept = {n: fisher[n] for n in theta_star}
    scale = sum(float(f.sum()) for f in kept.values()) / max(sum(f.numel() for f in kept.values()), 1)
    if scale > 0:
        kept = {n: f / scale for n, f in kept.items()}
    return EWCState(theta_star=theta_star, fisher=kept, lam=lam)


def ewc_penalty(model, state):
    """(lam / 2) * sum_i fisher_i * (theta_i - theta*_i)^2."""
    params = dict(model.named_parameters())
    total = torch.zeros(())
    for name, star in state.theta_star.items():
        p = params.get(name)
        if p is None or p.shape != star.shape:
            raise ConfigError(f"model parameter {name} missing or reshaped vs EWC anchor")
        total = total + (state.fisher[name] * (p - star) ** 2).sum()
    return 0.5 * state.lam * total


def extend_head(head, n_new_classes, seed):
    """Grow the class-logit output; old class rows, background row, and box
    rows are preserved bitwise; new class rows get small seeded init."""
    if n_new_classes < 1:
        raise ConfigError(f"n_new_classes must be >= 1, got {n_new_classes}")
    n_old = head.n_classes
    new_head = Head(head.conv.in_channels, n_old + n_new_classes)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        w = torch.zeros_like(new_head.conv.weight)
        b = torch.zeros_like(new_head.conv.bias)
        w[:n_old] = head.conv.weight[:n_old]
        b[:n_old] = head.conv.bias[:n_old]
        w[n_old : n_old + n_new_classes] = (
            torch.randn((n_new_classes,) + tuple(w.shape[1:]), generator=gen) * 0.01
        )
        b[n_old : n_old + n_new_classes] = 0.0
        # background + 4 box-delta rows move to the end of the new layout
        w[n_old + n_new_classes :] = head.conv.weight[n_old:]
        b[n_old + n_new_classes :] = head.conv.bias[n_old:]
        new_head.conv.weight.copy_(w)
        new_head.conv.bias.copy_(b)
    return new_head


def extend_model_head(model, n_new_classes, seed):
    """In-place head growth on an IcodModel."""
    model.head = extend_head(model.head, n_new_classes, seed)
    model.n_classes = model.head.n_classes
    return model


def incremental_train(model, new_dataset, strategy, ewc_state=None, class_remap=None, log_file=None):
    """Train a loaded old-task model on new-task data under the given strategy.

    Uses the plain detection objective on new data for all strategies. Returns
    the per-step history; the model is updated in place.
    """
    frozen = ()
    penalty = None
    if strategy.kind == "freeze_backbone":
        frozen = ("backbone.", "decomposer.")
    elif strategy.kind == "ewc":
        if ewc_state is None:
            raise ConfigError("ewc strategy requires an EWCState")
        state = EWCState(theta_star=ewc_state.theta_star, fisher=ewc_state.fisher, lam=strategy.lam)
        penalty = lambda m: ewc_penalty(m, state)
    return train_model(
        model,
        new_dataset,
        strategy.hyper,
        mode="baseline",
        penalty=penalty,
        frozen_prefixes=frozen,
        class_remap=class_remap,
        log_file=log_file,
    )
