"""Network training: Adadelta on negative mean soft IoU over all classes.

Both the attacked network and its surrogate train with the same procedure;
they differ only in their data subsets and seeds. Elastic augmentation is
applied to each training sample with probability 0.5. The returned weights
are the best-validation-IoU checkpoint, and training is a pure function of
(dataset, config, seed).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import data as data_mod
from .autodiff import Tensor
from .metrics import SCOPE_ALL, mean_iou, one_hot, soft_iou_loss
from .model import Network, UNetSpec, argmax_labels, build_unet, forward, predict


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 4
    augment_prob: float = 0.5
    rho: float = 0.95
    eps_opt: float = 1e-6
    lr: float = 1.0
    seed: int = 21
    patience: int = 30

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ValueError(f"augment_prob must be in [0, 1], got {self.augment_prob}")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must be in (0, 1), got {self.rho}")
        if self.eps_opt <= 0 or self.lr <= 0:
            raise ValueError("eps_opt and lr must be positive")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")


class AdadeltaState:
    """Per-parameter accumulators E[g^2] and E[dx^2], created at zero."""

    def __init__(self, params: dict[str, Tensor]):
        self.sq_grad = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.sq_delta = {n: np.zeros_like(p.data) for n, p in params.items()}


def adadelta_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdadeltaState,
    rho: float = 0.95,
    eps_opt: float = 1e-6,
    lr: float = 1.0,
) -> tuple[dict[str, Tensor], AdadeltaState]:
    """One in-place update:

    E[g^2] <- rho*E[g^2] + (1-rho)*g^2
    delta   = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
    E[dx^2] <- rho*E[dx^2] + (1-rho)*delta^2
    param  += lr * delta
    """
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must be in (0, 1), got {rho}")
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        eg = state.sq_grad[name]
        ed = state.sq_delta[name]
        eg *= rho
        eg += (1.0 - rho) * g * g
        delta = -np.sqrt(ed + eps_opt) / np.sqrt(eg + eps_opt) * g
        ed *= rho
        ed += (1.0 - rho) * delta * delta
        p.data += lr * delta
    return params, state


def _evaluate(net: Network, samples) -> float:
    """Mean over samples of the all-class mean IoU against ground truth."""
    probs = predict(net, Tensor(data_mod.image_batch(samples)))
    pred = argmax_labels(probs)
    return float(np.mean([
        mean_iou(pred[i], s.labels, SCOPE_ALL) for i, s in enumerate(samples)
    ]))


def train(net: Network, train_samples, val_samples, config: TrainConfig):
    """Train in place; returns (net, log) with the best-validation weights.

    Each epoch shuffles the training ids, draws a Bernoulli(augment_prob)
    elastic deformation per sample, and steps Adadelta per mini-batch on the
    negative mean soft IoU over all six classes. Stops early when validation
    mean IoU has not improved for ``patience`` epochs.
    """
    config.validate()
    if not train_samples or not val_samples:
        raise ValueError("need non-empty train and validation sets")
    rng = np.random.default_rng(config.seed)
    state = AdadeltaState(net.params)
    num_classes = net.spec.num_classes

    best_iou = -1.0
    best_epoch = -1
    best_params: dict[str, np.ndarray] = {}
    best_buffers: dict[str, np.ndarray] = {}
    log: list[dict] = []

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_samples))
        batch_losses = []
        net.training = True
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            images = []
            labels = []
            for idx in chunk:
                sample = train_samples[idx]
                if rng.random() < config.augment_prob:
                    sample = data_mod.elastic_deform(sample, seed=int(rng.integers(2**63)))
                images.append(sample.image)
                labels.append(sample.labels)
            x = Tensor(np.stack(images)[:, None])
            t = one_hot(np.stack(labels), num_classes)
            probs = forward(net, x)
            loss = soft_iou_loss(probs, t, SCOPE_ALL)
            loss.backward()
            grads = {n: p.grad for n, p in net.params.items()}
            adadelta_step(net.params, grads, state, config.rho, config.eps_opt, config.lr)
            net.zero_grad()
            batch_losses.append(loss.item())
        net.training = False

        val_iou = _evaluate(net, val_samples)
        if not np.isfinite(val_iou):
            raise RuntimeError(
                f"validation mean IoU became non-finite at epoch {epoch} "
                f"(train loss {np.mean(batch_losses):.4f})"
            )
        log.append({
            "epoch": epoch,
            "train_loss": float(np.mean(batch_losses)),
            "val_mean_iou": val_iou,
        })
        if val_iou > best_iou:
            best_iou = val_iou
            best_epoch = epoch
            best_params = {n: p.data.copy() for n, p in net.params.items()}
            best_buffers = {n: b.copy() for n, b in net.buffers.items()}
        elif epoch - best_epoch >= config.patience:
            break

    for n, p in net.params.items():
        p.data = best_params[n]
    for n in net.buffers:
        # keep the buffer objects (forward closes over them), refresh contents
        net.buffers[n][...] = best_buffers[n]
    net.training = False
    return net, log


def train_pair(samples_by_id: dict, plan: data_mod.SplitPlan, spec: UNetSpec,
               config: TrainConfig):
    """Train the attacked network and its surrogate on their respective
    splits with independent seeds; everything else is identical."""
    nets = []
    for i, (train_ids, val_ids) in enumerate([
        (plan.target_train, plan.target_val),
        (plan.surrogate_train, plan.surrogate_val),
    ]):
        seed = int(np.random.SeedSequence([config.seed, i]).generate_state(1)[0])
        net = build_unet(spec, seed=seed)
        cfg = replace(config, seed=seed)
        net, _ = train(net,
                       [samples_by_id[s] for s in train_ids],
                       [samples_by_id[s] for s in val_ids],
                       cfg)
        nets.append(net)
    return nets[0], nets[1]


def write_training_log(path, log) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_mean_iou"])
        writer.writeheader()
        for row in log:
            writer.writerow(row)
