"""Dense tensor plumbing on top of torch autograd.

Tensors are channel-major and row-major everywhere: a batch of volumes is
``(B, C, H, W, D)``. Training runs in float32; gradient checks switch to
float64 through :func:`float64_mode`.

The finite-difference checker and the loop-based convolution references in
this module do not use autograd, so they act as independent oracles for the
torch-backed layers.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class ShapeError(ValueError):
    """Raised when two operands have incompatible shapes."""

    def __init__(self, message: str, shape_a=None, shape_b=None):
        if shape_a is not None:
            message = f"{message}: {tuple(shape_a)} vs {tuple(shape_b)}"
        super().__init__(message)
        self.shape_a = None if shape_a is None else tuple(shape_a)
        self.shape_b = None if shape_b is None else tuple(shape_b)


def check_same_shape(a, b, what: str = "shape mismatch") -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(what, a.shape, b.shape)


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return t


# -- seeding ---------------------------------------------------------------

def seed_all(seed: int) -> None:
    """Seed torch's global generator (used for parameter init)."""
    torch.manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)


def numpy_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, *stream)``.

    ``SeedSequence`` spawning keys make streams for different sample
    indices statistically independent and reproducible from one seed.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(prev)


# -- parameter store -------------------------------------------------------

def param_store(module: nn.Module) -> "OrderedDict[str, nn.Parameter]":
    """Named, ordered view of the trainable parameters of ``module``."""
    return OrderedDict((n, p) for n, p in module.named_parameters() if p.requires_grad)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# -- ops not shipped by torch in the needed form ----------------------------

def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    """Unit-normalize along ``dim``; zero vectors stay zero."""
    return x / x.norm(dim=dim, keepdim=True).clamp_min(eps)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cosine between matched vectors of two same-shaped batches."""
    check_same_shape(a, b, "cosine_similarity operands")
    return (l2_normalize(a, dim) * l2_normalize(b, dim)).sum(dim)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of ``(N, K)`` logits against integer labels."""
    if logits.ndim != 2 or labels.shape != logits.shape[:1]:
        raise ShapeError("cross_entropy logits/labels", logits.shape, labels.shape)
    return F.cross_entropy(logits, labels.long())


def instance_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    return F.instance_norm(x, eps=eps)


def pad_to_multiple(x: torch.Tensor, dim: int, multiple: int) -> tuple[torch.Tensor, int]:
    """Zero-pad ``x`` at the end of ``dim`` to a multiple; returns (padded, pad)."""
    n = x.shape[dim]
    pad = (-n) % multiple
    if pad == 0:
        return x, 0
    shape = list(x.shape)
    shape[dim] = pad
    return torch.cat([x, x.new_zeros(shape)], dim=dim), pad


def crop(x: torch.Tensor, dim: int, length: int) -> torch.Tensor:
    return x.narrow(dim, 0, length)


# -- loop references (oracles) --------------------------------------------

def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    return tuple(int(a) for a in v)


def conv3d_reference(x, w, b=None, stride=1, padding=0) -> np.ndarray:
    """Direct seven-loop 3D convolution (cross-correlation) in float64.

    ``x``: (N, Cin, H, W, D); ``w``: (Cout, Cin, kH, kW, kD).
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    sh, sw_, sd = _triple(stride)
    ph, pw, pd = _triple(padding)
    n, cin, h, wd, d = x.shape
    cout, cin2, kh, kw, kd = w.shape
    if cin != cin2:
        raise ShapeError("conv3d channels", x.shape, w.shape)
    xp = np.zeros((n, cin, h + 2 * ph, wd + 2 * pw, d + 2 * pd))
    xp[:, :, ph:ph + h, pw:pw + wd, pd:pd + d] = x
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw_ + 1
    od = (d + 2 * pd - kd) // sd + 1
    out = np.zeros((n, cout, oh, ow, od))
    for bi in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    for k in range(od):
                        acc = 0.0 if b is None else float(b[co])
                        for ci in range(cin):
                            patch = xp[bi, ci, i * sh:i * sh + kh, j * sw_:j * sw_ + kw, k * sd:k * sd + kd]
                            acc += float((patch * w[co, ci]).sum())
                        out[bi, co, i, j, k] = acc
    return out


def conv_transpose3d_reference(x, w, b=None, stride=1, padding=0) -> np.ndarray:
    """Scatter-form transposed convolution. ``w``: (Cin, Cout, kH, kW, kD)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    s = _triple(stride)
    p = _triple(padding)
    n, cin, *size = x.shape
    _, cout, *k = w.shape
    full = [(size[a] - 1) * s[a] + k[a] for a in range(3)]
    out = np.zeros((n, cout, *full))
    for bi, ci, i, j, l in itertools.product(range(n), range(cin), range(size[0]), range(size[1]), range(size[2])):
        out[bi, :, i * s[0]:i * s[0] + k[0], j * s[1]:j * s[1] + k[1], l * s[2]:l * s[2] + k[2]] += x[bi, ci, i, j, l] * w[ci]
    out = out[:, :, p[0]:full[0] - p[0], p[1]:full[1] - p[1], p[2]:full[2] - p[2]]
    if b is not None:
        out = out + np.asarray(b, dtype=np.float64).reshape(1, -1, 1, 1, 1)
    return out


# -- finite-difference gradient checking ----------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error between autograd and central differences."""

    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    nonfinite: list[str] = field(default_factory=list)
    kinks: dict[str, int] = field(default_factory=dict)     # elements skipped for crossing a kink

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def ok(self, tol: float) -> bool:
        return not self.nonfinite and self.worst < tol


def _rel_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    f: Callable[[], torch.Tensor],
    params: "OrderedDict[str, torch.Tensor] | dict[str, torch.Tensor]",
    eps: float = 1e-5,
    max_elements: int = 32,
    seed: int = 0,
    floor: float = 1e-6,
    pattern: Callable[[], bytes] | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``f()`` with central differences.

    ``params`` must be float64 leaf tensors with ``requires_grad``. Tensors
    with more than ``max_elements`` entries are checked on a seeded random
    subset of that size. ``floor`` bounds the relative-error denominator so
    that entries whose true gradient is ~0 are judged on absolute error.

    ``pattern`` fingerprints the piecewise-linear regime of the last ``f()``
    call (e.g. activation signs). An element whose +-eps evaluations change
    it straddles a kink, where a central difference is meaningless; it is
    counted in ``kinks`` and replaced by the next sampled element.
    """
    report = GradCheckReport()
    for p in params.values():
        if p.dtype != torch.float64:
            raise TypeError("grad_check requires float64 parameters")
        p.grad = None
    out = f()
    if out.numel() != 1:
        raise ShapeError("grad_check needs a scalar function", out.shape, ())
    if not torch.isfinite(out):
        report.nonfinite.append("<f>")
        return report
    base = pattern() if pattern else None
    out.backward()
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, p in params.items():
            analytic = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
            flat = p.view(-1)
            order = rng.permutation(flat.numel()) if flat.numel() > max_elements else np.arange(flat.numel())
            worst, checked, kinks = 0.0, 0, 0
            for i in order:
                if checked == max_elements:
                    break
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = f().item()
                crossed = pattern is not None and pattern() != base
                flat[i] = orig - eps
                fm = f().item()
                crossed = crossed or (pattern is not None and pattern() != base)
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    report.nonfinite.append(f"{name}[{i}]")
                    continue
                if crossed:
                    kinks += 1
                    continue
                numeric = (fp - fm) / (2 * eps)
                worst = max(worst, _rel_error(analytic.view(-1)[i].item(), numeric, floor))
                checked += 1
            report.max_rel_error[name] = worst
            report.checked[name] = checked
            report.kinks[name] = kinks
    return report


def grad_check_inputs(
    f: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-5,
    max_elements: int = 32,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """:func:`grad_check` over positional inputs of ``f`` instead of a module."""
    leaves = OrderedDict((f"input{i}", t.detach().clone().double().requires_grad_(True)) for i, t in enumerate(inputs))
    vals = list(leaves.values())
    return grad_check(lambda: f(*vals), leaves, eps=eps, max_elements=max_elements, seed=seed, floor=floor)
