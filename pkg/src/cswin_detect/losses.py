"""Pretext losses, the automatic weighted loss and the finetuning loss."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .numeric import ShapeError, check_same_shape, cross_entropy, l2_normalize

AWL_EPS = 1e-3


def contrastive_loss(embeddings: torch.Tensor, temperature: float = 0.5) -> torch.Tensor:
    """NT-Xent over ``2N`` embeddings whose positive pairs are ``(2i, 2i+1)``.

    Rows are L2-normalized here, so callers may pass raw head outputs. With
    a single pair there are no negatives and the loss is exactly 0.
    """
    if embeddings.ndim != 2 or embeddings.shape[0] % 2:
        raise ShapeError("contrastive embeddings must be (2N, dim)", embeddings.shape, ("2N", "dim"))
    n2 = embeddings.shape[0]
    if n2 == 0:
        raise ValueError("contrastive loss needs at least one pair")
    z = l2_normalize(embeddings)
    sim = z @ z.T / temperature
    self_mask = torch.eye(n2, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(self_mask, float("-inf"))
    pos = torch.arange(n2, device=z.device) ^ 1
    return F.cross_entropy(sim, pos)


def restoration_loss(reconstruction: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    """Mean absolute voxel error."""
    check_same_shape(reconstruction, original, "restoration_loss shapes")
    return (reconstruction - original).abs().mean()


def rotation_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of 4-way rotation logits."""
    if logits.ndim != 2 or logits.shape[1] != 4:
        raise ShapeError("rotation logits must be (N, 4)", logits.shape, ("N", 4))
    labels = torch.as_tensor(labels)
    if labels.numel() and (labels.min() < 0 or labels.max() > 3):
        raise ValueError(f"rotation labels must lie in 0..3, got {labels.tolist()}")
    return cross_entropy(logits, labels)


class AutomaticWeightedLoss(nn.Module):
    """Learnable task coefficients ``c_t = softplus(raw_t) + eps`` (always > 0).

    The combined loss is ``sum_t L_t / (2 c_t^2) + ln prod_t (1 + c_t^2)``.
    """

    def __init__(self, n_tasks: int = 3, init: float = 1.0):
        super().__init__()
        raw = math.log(math.expm1(init - AWL_EPS))
        self.raw = nn.Parameter(torch.full((n_tasks,), raw))

    @property
    def coefficients(self) -> torch.Tensor:
        return F.softplus(self.raw) + AWL_EPS

    def effective_weights(self) -> torch.Tensor:
        return 1.0 / (2 * self.coefficients ** 2)

    def forward(self, *losses):
        return awl_combine(*losses, c=self.coefficients)


def awl_combine(*losses, c) -> torch.Tensor:
    """``sum_t l_t / (2 c_t^2) + ln((1 + c_1^2)(1 + c_2^2)...)``."""
    c = torch.as_tensor(c)
    if len(losses) != c.numel():
        raise ValueError(f"{len(losses)} losses but {c.numel()} coefficients")
    total = torch.log1p(c ** 2).sum()
    for i, l in enumerate(losses):
        total = total + l / (2 * c[i] ** 2)
    return total


def soft_dice(probs_fg: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Soft dice of a foreground probability map against a binary mask."""
    check_same_shape(probs_fg, target, "soft_dice shapes")
    inter = (probs_fg * target).sum()
    return (2 * inter + eps) / (probs_fg.sum() + target.sum() + eps)


def generalized_dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Generalized dice over ``(B, K, ...)`` probabilities and one-hot targets.

    Class weights are inverse squared class volumes over the whole batch;
    a class absent from the target takes the largest finite weight.
    """
    dims = [0] + list(range(2, probs.ndim))
    vol = target.sum(dim=dims)
    present = vol > 0
    w = torch.where(present, 1.0 / vol.clamp_min(eps) ** 2, torch.zeros_like(vol))
    w = torch.where(present, w, w.max())
    inter = (probs * target).sum(dim=dims)
    denom = (probs + target).sum(dim=dims)
    return 1 - (2 * (w * inter).sum() + eps) / ((w * denom).sum() + eps)


def focal_loss(probs: torch.Tensor, target: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Mean over voxels of ``-(1 - p_true)^gamma log p_true``."""
    p_true = (probs * target).sum(dim=1)
    logp = torch.log(p_true.clamp_min(1e-12))
    return (-(1 - p_true) ** gamma * logp).mean()


def one_hot_mask(mask: torch.Tensor, n_classes: int = 2) -> torch.Tensor:
    """``(B, ...)`` integer mask -> ``(B, K, ...)`` float one-hot."""
    oh = F.one_hot(mask.long(), n_classes)
    return oh.movedim(-1, 1).to(torch.get_default_dtype())


def dice_focal_loss(probs: torch.Tensor, target: torch.Tensor, lam: float = 0.5, gamma: float = 2.0) -> torch.Tensor:
    """``lam * GDL + (1 - lam) * focal`` for ``(B, 2, ...)`` probabilities.

    ``target`` is a binary ``(B, ...)`` mask or an already one-hot map.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if target.shape != probs.shape:
        if target.shape != probs.shape[:1] + probs.shape[2:]:
            raise ShapeError("dice_focal_loss target", target.shape, probs.shape)
        target = one_hot_mask(target, probs.shape[1]).to(probs.dtype)
    loss = probs.new_zeros(())
    if lam > 0:
        loss = loss + lam * generalized_dice_loss(probs, target)
    if lam < 1:
        loss = loss + (1 - lam) * focal_loss(probs, target, gamma)
    return loss
