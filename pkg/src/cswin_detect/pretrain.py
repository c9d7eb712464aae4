"""Self-supervised pretraining of the CSwin encoder with three pretext tasks."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .augment import AugmentConfig, augment, rotate
from .checkpoint import save_checkpoint
from .losses import AutomaticWeightedLoss, contrastive_loss, restoration_loss, rotation_loss
from .model import CSwinConfig, CSwinEncoder, InstanceNorm, downsample_strides
from .numeric import numpy_rng
from .training import deterministic, guard, make_optimizer
from .validation import check_volumes

TASKS = ("cl", "cr", "rot")


class PretextHeads(nn.Module):
    """Contrastive projection, rotation classifier and restoration ladder.

    The restoration ladder has one transposed convolution per octave from the
    1/32 bottleneck back to the input grid, followed by a 1x1x1 projection to
    the image channels.
    """

    def __init__(self, cfg: CSwinConfig, embed_dim: int = 384):
        super().__init__()
        self.cfg = cfg
        f1, f2, f4, f8 = cfg.stage_dims
        self.contrastive = nn.Linear(f8, embed_dim)
        self.rotation = nn.Linear(f8, 4)
        widths = [f8, f4, f2, f1, f1, f1]
        self.ups = nn.ModuleList(nn.ConvTranspose3d(widths[i], widths[i + 1], kernel_size=2, stride=2) for i in range(5))
        self.norms = nn.ModuleList(InstanceNorm(widths[i + 1]) for i in range(5))
        self.act = nn.LeakyReLU(0.01)
        self.out = nn.Conv3d(f1, cfg.in_channels, 1)

    def restore(self, bottleneck, spatial):
        strides = downsample_strides(spatial, self.cfg.anisotropic)
        h = bottleneck
        for up, norm, s in zip(self.ups, self.norms, reversed(strides)):
            up.stride = s
            h = self.act(norm(up(h)))
        h = h[:, :, : spatial[0], : spatial[1], : spatial[2]]
        return self.out(h)

    def forward(self, bottleneck, spatial):
        pooled = bottleneck.mean(dim=(2, 3, 4))
        return self.contrastive(pooled), self.rotation(pooled), self.restore(bottleneck, spatial)


class SSLModel(nn.Module):
    def __init__(self, cfg: CSwinConfig, embed_dim: int = 384):
        super().__init__()
        self.cfg = cfg
        self.encoder = CSwinEncoder(cfg)
        self.heads = PretextHeads(cfg, embed_dim)
        self.awl = AutomaticWeightedLoss(len(TASKS))

    def forward(self, x):
        feats = self.encoder(x)
        return self.heads(feats.bottleneck, tuple(x.shape[2:]))


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch: int = 8                  # views per step (two per source volume)
    lr: float = 1e-3
    warmup_epochs: int = 3
    weight_decay: float = 0.05
    temperature: float = 0.5
    embed_dim: int = 384
    loss_weighting: str = "awl"     # "awl" or "equal"
    seed: int = 0
    model: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch % 2 or self.batch < 4:
            raise ValueError(f"batch counts views and must be even and >= 4, got {self.batch}")
        if self.loss_weighting not in ("awl", "equal"):
            raise ValueError(f"loss_weighting must be 'awl' or 'equal', got {self.loss_weighting!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def model_config(self) -> CSwinConfig:
        return CSwinConfig.from_dict(self.model)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(**self.augment)

    def to_dict(self):
        return asdict(self)


def _batches(n: int, pairs: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n - pairs + 1, pairs):
        yield order[i:i + pairs]


def _stack_pairs(volumes, idx, seed, epoch, acfg):
    views, rots, targets = [], [], []
    for i in idx:
        p = augment(volumes[i], seed, acfg, stream=(2, epoch, int(i)))
        views += [p.view_a, p.view_b]
        rots += [p.rot_label_a, p.rot_label_b]
        targets += [p.target_a, p.target_b]
    return (torch.from_numpy(np.stack(views)), torch.tensor(rots), torch.from_numpy(np.stack(targets)))


@dataclass
class PretrainResult:
    model: SSLModel
    history: list
    steps: int


def pretrain(volumes, cfg: PretrainConfig, log=None) -> PretrainResult:
    """Train encoder + pretext heads; returns the model and per-epoch history.

    Raises :class:`~cswin_detect.training.TrainingDiverged` on a non-finite
    loss, carrying the offending step.
    """
    volumes = check_volumes(volumes)
    pairs = cfg.batch // 2
    if len(volumes) < pairs:
        raise ValueError(f"{len(volumes)} volumes cannot fill a batch of {pairs} pairs")
    deterministic(cfg.seed)
    model = SSLModel(cfg.model_config(), cfg.embed_dim)
    acfg = cfg.augment_config()
    steps_per_epoch = len(volumes) // pairs
    decay = [p for n, p in model.named_parameters() if not n.startswith("awl.")]
    groups = [{"params": decay}, {"params": list(model.awl.parameters()), "weight_decay": 0.0}]
    opt, sched = make_optimizer(groups, cfg.lr, cfg.weight_decay, cfg.epochs * steps_per_epoch, cfg.warmup_epochs * steps_per_epoch)

    history, step = [], 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        sums = dict.fromkeys(("loss", *TASKS), 0.0)
        nb = 0
        for idx in _batches(len(volumes), pairs, numpy_rng(cfg.seed, 1, epoch)):
            views, rots, targets = _stack_pairs(volumes, idx, cfg.seed, epoch, acfg)
            emb, logits, recon = model(views)
            l_cl = contrastive_loss(emb, cfg.temperature)
            l_cr = restoration_loss(recon, targets)
            l_rot = rotation_loss(logits, rots)
            if cfg.loss_weighting == "awl":
                loss = model.awl(l_cl, l_cr, l_rot)
            else:
                loss = l_cl + l_cr + l_rot
            step += 1
            guard(step, epoch, loss=loss, cl=l_cl, cr=l_cr, rot=l_rot)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            for k, v in zip(("loss", *TASKS), (loss, l_cl, l_cr, l_rot)):
                sums[k] += float(v.detach())
            nb += 1
        with torch.no_grad():
            c = model.awl.coefficients
            weights = model.awl.effective_weights() if cfg.loss_weighting == "awl" else torch.ones(3)
        rec = {"epoch": epoch, "step": step, "lr": float(sched.get_last_lr()[0])}
        rec.update({f"loss_{k}" if k != "loss" else "loss": v / nb for k, v in sums.items()})
        rec.update({f"weight_{t}": float(w) for t, w in zip(TASKS, weights)})
        rec.update({f"c_{t}": float(v) for t, v in zip(TASKS, c)})
        history.append(rec)
        if log:
            log(rec)
    return PretrainResult(model, history, step)


@torch.no_grad()
def rotation_accuracy(model: SSLModel, volumes) -> float:
    """Fraction of the four rotations of each volume classified correctly."""
    volumes = check_volumes(volumes)
    model.eval()
    hits = 0
    for k in range(4):
        x = torch.from_numpy(np.stack([rotate(v, k) for v in volumes]))
        _, logits, _ = model(x)
        hits += int((logits.argmax(1) == k).sum())
    return hits / (4 * len(volumes))


def save_pretrained(path, result: PretrainResult, cfg: PretrainConfig):
    return save_checkpoint(
        path, result.model.state_dict(),
        config={"model": result.model.cfg.to_dict(), "pretrain": cfg.to_dict()},
        seed=cfg.seed, extra={"kind": "ssl", "steps": result.steps},
    )


class SSLPretrainer(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``fit`` pretrains, ``transform`` returns pooled bottleneck features."""

    def __init__(self, model_config=None, epochs=30, batch=8, lr=1e-3, warmup_epochs=3, weight_decay=0.05,
                 temperature=0.5, embed_dim=384, loss_weighting="awl", augment_config=None, seed=0):
        self.model_config = model_config
        self.epochs = epochs
        self.batch = batch
        self.lr = lr
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.temperature = temperature
        self.embed_dim = embed_dim
        self.loss_weighting = loss_weighting
        self.augment_config = augment_config
        self.seed = seed

    def _config(self) -> PretrainConfig:
        return PretrainConfig(
            epochs=self.epochs, batch=self.batch, lr=self.lr, warmup_epochs=self.warmup_epochs,
            weight_decay=self.weight_decay, temperature=self.temperature, embed_dim=self.embed_dim,
            loss_weighting=self.loss_weighting, seed=self.seed,
            model=dict(self.model_config or {}), augment=dict(self.augment_config or {}),
        )

    def fit(self, X, y=None):
        cfg = self._config()
        res = pretrain(X, cfg)
        self.config_ = cfg
        self.model_ = res.model
        self.history_ = res.history
        self.n_steps_ = res.steps
        return self

    @torch.no_grad()
    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_volumes(X)
        self.model_.eval()
        feats = self.model_.encoder(torch.from_numpy(X))
        return feats.bottleneck.mean(dim=(2, 3, 4)).numpy()

    @torch.no_grad()
    def predict_rotation(self, X):
        check_is_fitted(self, "model_")
        X = check_volumes(X)
        self.model_.eval()
        _, logits, _ = self.model_(torch.from_numpy(X))
        return logits.argmax(1).numpy()

    def rotation_score(self, X) -> float:
        check_is_fitted(self, "model_")
        return rotation_accuracy(self.model_, X)

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_pretrained(path, PretrainResult(self.model_, self.history_, self.n_steps_), self.config_)
