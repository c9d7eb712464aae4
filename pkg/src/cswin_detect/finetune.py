"""Supervised finetuning of the CSwin UNet with the dice-focal loss."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import ArchitectureMismatch, check_compatible, load_checkpoint, load_into, save_checkpoint
from .losses import dice_focal_loss, soft_dice
from .model import CSwinConfig, CSwinUNet
from .numeric import numpy_rng
from .training import deterministic, guard, make_optimizer
from .validation import check_masks, check_volumes


@dataclass
class FinetuneConfig:
    init: str = "random"            # "random" or a pretraining checkpoint path
    epochs: int = 150
    lr: float = 1e-4
    warmup_epochs: int = 10
    weight_decay: float = 1e-5
    batch: int = 2
    lam: float = 0.5
    gamma: float = 2.0
    seed: int = 0
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")

    def model_config(self) -> CSwinConfig:
        return CSwinConfig.from_dict(self.model)

    def to_dict(self):
        return asdict(self)


def fold_of(case_id: str, k: int = 5) -> int:
    """Deterministic fold from a stable hash of the case id."""
    return int.from_bytes(hashlib.sha256(case_id.encode()).digest()[:8], "little") % k


def init_encoder(model: CSwinUNet, path) -> "dict[str, torch.Tensor]":
    """Copy ``encoder.*`` tensors of a pretraining checkpoint into ``model``.

    Raises :class:`ArchitectureMismatch` naming the layers that differ, and
    also when the stored model config disagrees with ``model.cfg``.
    """
    ckpt = load_checkpoint(path)
    state = ckpt.state_dict("encoder.")
    if not state:
        raise ArchitectureMismatch(list(model.encoder.state_dict()), [], [])
    check_compatible(model.encoder, state)
    stored = ckpt.config.get("model")
    if stored is not None:
        own = model.cfg.to_dict()
        diff = sorted(k for k in set(own) | set(stored) if own.get(k) != stored.get(k))
        if diff:
            raise ArchitectureMismatch([], [], [(f"config.{k}", own.get(k), stored.get(k)) for k in diff])
    load_into(model.encoder, state)
    return state


def _epoch_batches(n, batch, rng):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


@torch.no_grad()
def predict_probs(model: CSwinUNet, X, batch: int = 4) -> np.ndarray:
    """Class-1 probability maps ``(N, H, W, D)``."""
    model.eval()
    out = [model(torch.from_numpy(X[i:i + batch]))[:, 1].numpy() for i in range(0, len(X), batch)]
    return np.concatenate(out)


@torch.no_grad()
def _validate(model, X, y, cfg):
    model.eval()
    losses, dices = [], []
    for i in range(len(X)):
        probs = model(torch.from_numpy(X[i:i + 1]))
        target = torch.from_numpy(y[i:i + 1])
        losses.append(float(dice_focal_loss(probs, target, cfg.lam, cfg.gamma)))
        dices.append(float(soft_dice(probs[:, 1], target.to(probs.dtype))))
    return float(np.mean(losses)), float(np.mean(dices))


@dataclass
class FinetuneResult:
    model: CSwinUNet
    history: list
    steps: int


def finetune(X, y, cfg: FinetuneConfig, X_val=None, y_val=None, log=None, max_steps: int | None = None) -> FinetuneResult:
    """Train a segmentation model; ``history`` has one record per epoch.

    The decoder is always freshly initialized. With a checkpoint ``init`` the
    encoder starts from its ``encoder.*`` tensors bit-exactly.
    """
    X = check_volumes(X)
    y = check_masks(y, X)
    has_val = X_val is not None
    if has_val:
        X_val = check_volumes(X_val, X.shape[1])
        y_val = check_masks(y_val, X_val)
    deterministic(cfg.seed)
    model = CSwinUNet(cfg.model_config())
    if cfg.init != "random":
        init_encoder(model, cfg.init)
    steps_per_epoch = -(-len(X) // cfg.batch)
    total = cfg.epochs * steps_per_epoch if max_steps is None else min(max_steps, cfg.epochs * steps_per_epoch)
    opt, sched = make_optimizer(model.parameters(), cfg.lr, cfg.weight_decay, total, cfg.warmup_epochs * steps_per_epoch)

    history, step = [], 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        tot, nb = 0.0, 0
        for idx in _epoch_batches(len(X), cfg.batch, numpy_rng(cfg.seed, 3, epoch)):
            probs = model(torch.from_numpy(X[idx]))
            loss = dice_focal_loss(probs, torch.from_numpy(y[idx]), cfg.lam, cfg.gamma)
            step += 1
            guard(step, epoch, loss=loss)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            tot += float(loss.detach())
            nb += 1
            if step >= total:
                break
        rec = {"epoch": epoch, "train_loss": tot / nb, "val_loss": None, "val_dice": None}
        if has_val:
            rec["val_loss"], rec["val_dice"] = _validate(model, X_val, y_val, cfg)
        history.append(rec)
        if log:
            log(rec)
        if step >= total:
            break
    return FinetuneResult(model, history, step)


def save_model(path, model: CSwinUNet, cfg: FinetuneConfig, extra=None):
    return save_checkpoint(
        path, model.state_dict(),
        config={"model": model.cfg.to_dict(), "finetune": cfg.to_dict()},
        seed=cfg.seed, extra={"kind": "segmenter", **(extra or {})},
    )


def load_model(path) -> CSwinUNet:
    ckpt = load_checkpoint(path)
    model = CSwinUNet(CSwinConfig.from_dict(ckpt.config["model"]))
    load_into(model, ckpt.state_dict())
    return model


class CSwinSegmenter(BaseEstimator):
    """Estimator wrapper around :func:`finetune`.

    ``predict_proba`` returns class-1 detection maps ``(N, H, W, D)``;
    ``predict`` thresholds them at 0.5.
    """

    def __init__(self, model_config=None, init="random", epochs=150, lr=1e-4, warmup_epochs=10,
                 weight_decay=1e-5, batch=2, lam=0.5, gamma=2.0, seed=0):
        self.model_config = model_config
        self.init = init
        self.epochs = epochs
        self.lr = lr
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.batch = batch
        self.lam = lam
        self.gamma = gamma
        self.seed = seed

    def _config(self) -> FinetuneConfig:
        return FinetuneConfig(
            init=self.init, epochs=self.epochs, lr=self.lr, warmup_epochs=self.warmup_epochs,
            weight_decay=self.weight_decay, batch=self.batch, lam=self.lam, gamma=self.gamma,
            seed=self.seed, model=dict(self.model_config or {}),
        )

    def fit(self, X, y, X_val=None, y_val=None, max_steps=None):
        cfg = self._config()
        res = finetune(X, y, cfg, X_val, y_val, max_steps=max_steps)
        self.config_ = cfg
        self.model_ = res.model
        self.history_ = res.history
        self.n_steps_ = res.steps
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict_probs(self.model_, check_volumes(X, self.model_.cfg.in_channels))

    def predict(self, X):
        return (self.predict_proba(X) >= 0.5).astype(np.uint8)

    def score(self, X, y) -> float:
        """Mean soft dice of the detection maps against ``y``."""
        X = check_volumes(X)
        y = check_masks(y, X)
        p = self.predict_proba(X)
        return float(np.mean([float(soft_dice(torch.from_numpy(p[i]), torch.from_numpy(y[i]).float())) for i in range(len(X))]))

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_model(path, self.model_, self.config_)
