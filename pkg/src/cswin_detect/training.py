"""Optimizer, schedule and divergence guard shared by both training loops."""
from __future__ import annotations

import math

import torch

from .numeric import seed_all


class TrainingDiverged(FloatingPointError):
    """A loss went non-finite; ``step`` is the global optimizer step."""

    def __init__(self, step: int, epoch: int, losses: dict):
        self.step = step
        self.epoch = epoch
        self.losses = losses
        super().__init__(f"non-finite loss at step {step} (epoch {epoch}): {losses}")


def warmup_cosine(total_steps: int, warmup_steps: int):
    """LR multiplier: linear ramp to 1 over ``warmup_steps``, then cosine to 0."""
    total_steps = max(int(total_steps), 1)
    warmup_steps = min(max(int(warmup_steps), 0), total_steps - 1)

    def factor(step: int) -> float:
        if step < warmup_steps:
            return (step + 1) / (warmup_steps + 1)
        t = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
        return 0.5 * (1 + math.cos(math.pi * min(t, 1.0)))

    return factor


def make_optimizer(params, lr: float, weight_decay: float, total_steps: int, warmup_steps: int):
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_cosine(total_steps, warmup_steps))
    return opt, sched


def deterministic(seed: int) -> None:
    """Seed parameter init and force deterministic CPU kernels."""
    seed_all(seed)
    torch.use_deterministic_algorithms(True)


def guard(step: int, epoch: int, **losses) -> None:
    vals = {k: float(torch.as_tensor(v).detach()) for k, v in losses.items()}
    if not all(math.isfinite(v) for v in vals.values()):
        raise TrainingDiverged(step, epoch, vals)
