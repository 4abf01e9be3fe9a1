"""Training loops: the adversarial decomposition objective and a plain baseline.

Gradient routing of the combined objective:
  - theta_m descends on L_d(F, Y) + L_d(F_c, Y); the F_b pass runs on a
    detached feature map through detached head weights, so it contributes
    exactly zero gradient to the backbone and head.
  - theta_c descends on the w/b regularizer and ASCENDS on gamma * L_d(F_b, Y),
    realized by subtracting that term from the minimized scalar. The F_c pass
    treats F_b as a constant, so it contributes nothing to theta_c.
Equivalent to running separate min/max optimizers; the tests check this.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import torch

from . import decomposer as dec
from .detector import detection_loss, stack_targets
from .errors import ConfigError, DivergenceError
from .model import IcodModel, prepare_batches


@dataclass
class HyperParams:
    alpha: float = 0.005
    beta: float = 2.0
    gamma: float = 0.5
    lr: float = 2e-3
    lr_drop_epoch: int = 8
    lr_drop_factor: float = 0.1
    optimizer: str = "adam"
    momentum: float = 0.9  # used only by optimizer="sgd"
    epochs: int = 12
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("alpha, beta, gamma must be >= 0")
        if self.lr_drop_epoch > self.epochs:
            raise ConfigError(f"lr_drop_epoch {self.lr_drop_epoch} > epochs {self.epochs}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, epoch):
        return self.lr * (self.lr_drop_factor if epoch >= self.lr_drop_epoch else 1.0)


@dataclass
class LossBreakdown:
    l_c: float
    l_b: float
    l_wb: float
    total: float = field(default=None)

    def __post_init__(self):
        if self.total is None:
            self.total = self.l_c + self.l_b + self.l_wb


def icod_objective(model, images, targets, hyper, generator):
    """One forward pass of the combined objective.

    Returns (LossBreakdown, scalar to minimize). The breakdown reports
    total = L_c + gamma * L_b + L_wb; the minimized scalar carries -gamma * L_b
    so a single descent step performs the ascent on theta_c.
    """
    if images.shape[0] == 0:
        raise ConfigError("empty batch")
    batch_targets = stack_targets(targets)
    n = model.n_classes

    feat = model.backbone(images)
    _, _, ld_f = detection_loss(model.head(feat), batch_targets, n)

    feat_const = feat.detach()
    w = model.decomposer.channel_weight(feat_const)
    b = model.decomposer.channel_bias(feat_const)
    f_b = dec.bias_feature(feat_const, w, b)

    r = dec.sample_r(generator, model.feature_channels)
    f_c = dec.causal_feature(feat, f_b.detach(), r)
    _, _, ld_c = detection_loss(model.head(f_c), batch_targets, n)

    _, _, ld_b = detection_loss(model.head.forward_detached_params(f_b), batch_targets, n)
    l_wb = dec.reg_loss(w, b, hyper.alpha, hyper.beta)

    l_c = ld_f + ld_c
    for name, value in (("L_d(F)", ld_f), ("L_d(F_c)", ld_c), ("L_d(F_b)", ld_b), ("L_wb", l_wb)):
        v = float(value.detach())
        if not math.isfinite(v):
            raise DivergenceError(f"non-finite loss component {name} = {v}")
    gamma_lb = hyper.gamma * ld_b
    breakdown = LossBreakdown(
        l_c=float(l_c.detach()), l_b=float(gamma_lb.detach()), l_wb=float(l_wb.detach())
    )
    minimized = l_c + l_wb - gamma_lb
    return breakdown, minimized


def baseline_objective(model, images, targets, hyper=None, generator=None):
    """Plain detection objective on F only; decomposer untouched."""
    if images.shape[0] == 0:
        raise ConfigError("empty batch")
    batch_targets = stack_targets(targets)
    _, _, ld_f = detection_loss(model(images), batch_targets, model.n_classes)
    v = float(ld_f.detach())
    if not math.isfinite(v):
        raise DivergenceError(f"non-finite loss L_d(F) = {v}")
    return LossBreakdown(l_c=v, l_b=0.0, l_wb=0.0), ld_f


OBJECTIVES = {"icod": icod_objective, "baseline": baseline_objective}


def build_model(n_classes, seed, backbone_channels=(16, 32, 32)):
    torch.manual_seed(seed)
    return IcodModel(n_classes, backbone_channels=backbone_channels)


def train_model(
    model,
    dataset,
    hyper,
    mode="icod",
    penalty=None,
    frozen_prefixes=(),
    class_remap=None,
    log_file=None,
    epoch_callback=None,
):
    """Seeded epoch loop; returns per-step history of LossBreakdown dicts.

    penalty: optional callable (model) -> scalar tensor added to the minimized
    objective (EWC). frozen_prefixes: parameter-name prefixes excluded from
    optimization (bitwise frozen). Determinism holds single-threaded.
    """
    if mode not in OBJECTIVES:
        raise ConfigError(f"unknown training mode {mode!r}")
    objective = OBJECTIVES[mode]
    if mode == "icod":
        # the trained causal feature becomes the model's inference path
        model.inference_kind = "F_c"
    torch.set_num_threads(1)
    images, targets = prepare_batches(dataset, model.stride, model.n_classes, class_remap)
    n = images.shape[0]

    excluded = tuple(frozen_prefixes)
    if mode == "baseline":
        excluded = excluded + ("decomposer.",)
    trainable = [
        p for name, p in model.named_parameters() if not name.startswith(excluded)
    ]
    if hyper.optimizer == "adam":
        opt = torch.optim.Adam(trainable, lr=hyper.lr)
    else:
        opt = torch.optim.SGD(trainable, lr=hyper.lr, momentum=hyper.momentum)
    order_gen = torch.Generator().manual_seed(hyper.seed)
    r_gen = torch.Generator().manual_seed(hyper.seed ^ 0x5EED)

    history = []
    step = 0
    for epoch in range(hyper.epochs):
        lr = hyper.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        perm = torch.randperm(n, generator=order_gen)
        for start in range(0, n, hyper.batch_size):
            idx = perm[start : start + hyper.batch_size]
            batch_targets = [targets[i] for i in idx]
            breakdown, minimized = objective(model, images[idx], batch_targets, hyper, r_gen)
            if penalty is not None:
                pen = penalty(model)
                minimized = minimized + pen
                breakdown.total += float(pen.detach())
            opt.zero_grad()
            minimized.backward()
            opt.step()
            record = {"step": step, "epoch": epoch, "lr": lr, **asdict(breakdown)}
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
            step += 1
        if epoch_callback is not None:
            epoch_callback(epoch, model)
    return history
