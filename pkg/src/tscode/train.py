"""SGD training loop with a stepped learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .detection import assign_targets, stack_targets, total_loss
from .model import DetectionModel
from .tensor import Tensor4, tape_scope, backward


class DivergenceError(RuntimeError):
    """Raised when the loss becomes non-finite during training."""


class SGD:
    """SGD with momentum and L2 weight decay applied to every parameter."""

    def __init__(self, params: dict, lr: float, momentum: float = 0.9,
                 weight_decay: float = 1e-4):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self):
        for name, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad + self.weight_decay * t.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            t.data = t.data - self.lr * v

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


def lr_at(step: int, base_lr: float, milestones, warmup_steps: int = 0) -> float:
    """Stepped schedule: 10x decay at each milestone, optional linear warmup."""
    lr = base_lr * 0.1 ** sum(1 for m in milestones if step >= m)
    if warmup_steps > 0 and step < warmup_steps:
        lr *= (step + 1) / warmup_steps
    return lr


def train_loop(model: DetectionModel, images, gts_per_image, opt_cfg: dict,
               lam: float = 1.0, seed: int = 0, on_step=None):
    """Train on an in-memory dataset; returns the per-step log rows.

    `images` is a list of (3, S, S) arrays, `gts_per_image` the matching
    ground-truth lists. Deterministic given (weights, data, seed, opt_cfg).
    Raises DivergenceError when the loss goes non-finite.
    """
    steps = int(opt_cfg["steps"])
    batch_size = int(opt_cfg.get("batch_size", 4))
    base_lr = float(opt_cfg["lr"])
    milestones = list(opt_cfg.get("milestones") or
                      [int(steps * 2 / 3), int(steps * 8 / 9)])
    warmup = int(opt_cfg.get("warmup_steps", 0))
    image_dim = images[0].shape[-1]

    targets_cache = [assign_targets(gts, image_dim, model.levels) for gts in gts_per_image]
    opt = SGD(model.params, base_lr,
              momentum=float(opt_cfg.get("momentum", 0.9)),
              weight_decay=float(opt_cfg.get("weight_decay", 1e-4)))
    rng = np.random.default_rng(seed)
    rows = []
    order = np.array([], dtype=np.int64)
    for step in range(steps):
        if order.size < batch_size:
            order = np.concatenate([order, rng.permutation(len(images))])
        batch_idx, order = order[:batch_size], order[batch_size:]
        batch = Tensor4(np.stack([images[i] for i in batch_idx]))
        targets = stack_targets([targets_cache[i] for i in batch_idx])
        opt.lr = lr_at(step, base_lr, milestones, warmup)
        with tape_scope():
            outputs = model.forward(batch)
            loss, parts = total_loss(outputs, targets, lam=lam)
            if not np.isfinite(parts["total"]):
                raise DivergenceError(
                    f"non-finite loss at step {step}: {parts}")
            opt.zero_grad()
            backward(loss)
        opt.step()
        row = {"step": step, "lr": opt.lr, **parts}
        rows.append(row)
        if on_step is not None:
            on_step(row)
    return rows
