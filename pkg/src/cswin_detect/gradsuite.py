"""Float64 finite-difference checks over every layer and loss."""
from __future__ import annotations

import time
from collections import OrderedDict

import torch
from torch import nn

from .attention import CSwinAttention, CSwinBlock, scaled_cosine_attention
from .losses import (AutomaticWeightedLoss, contrastive_loss, dice_focal_loss, restoration_loss,
                     rotation_loss)
from .model import CSwinConfig, CSwinUNet, InstanceNorm
from .numeric import float64_mode, grad_check, grad_check_inputs, param_store, seed_all

TOL = 1e-4


def _randn(*shape, gen):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


class ActivationSigns:
    """Fingerprint of which side of zero every LeakyReLU input fell on in the last forward."""

    def __init__(self, module: nn.Module):
        self._signs = []
        self._hooks = [m.register_forward_pre_hook(self._record) for m in module.modules() if isinstance(m, nn.LeakyReLU)]

    def _record(self, module, args):
        self._signs.append((args[0] > 0).numpy().tobytes())

    def reset(self):
        self._signs = []

    def __call__(self) -> bytes:
        return b"".join(self._signs)


def _module_check(module: nn.Module, loss_fn, max_elements, seed, eps=1e-5):
    module = module.double()
    # move parameters off their init values: zero norm biases put activations on the LeakyReLU kink
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(_randn(*p.shape, gen=gen) * 0.05)
    signs = ActivationSigns(module)

    def f():
        signs.reset()
        return loss_fn()
    return grad_check(f, param_store(module), eps=eps, max_elements=max_elements, seed=seed, pattern=signs)


def small_unet_config() -> CSwinConfig:
    return CSwinConfig(feature_size=3, heads=(3, 3, 3, 3), depths=(1, 1, 1, 1), mlp_ratio=2.0, anisotropic=True)


def checks(seed: int = 0, max_elements: int = 32, unet_shape=(32, 32, 16), unet_elements: int = 8):
    """Yield ``(name, thunk)`` pairs; each thunk returns a GradCheckReport.

    The whole-network check samples ``unet_elements`` entries per parameter
    tensor; every op inside it is also checked on its own at ``max_elements``.
    """
    gen = torch.Generator().manual_seed(seed)

    def attention_inputs(cos):
        q, k, v = (_randn(2, 3, 5, 4, gen=gen) for _ in range(3))
        bias = _randn(3, 5, 5, gen=gen) * 0.1
        tau = torch.tensor([0.5, 0.8, 1.2], dtype=torch.float64)
        return lambda q, k, v, b, t: scaled_cosine_attention(q, k, v, t, b, use_cosine=cos).pow(2).sum(), [q, k, v, bias, tau]

    def attention(cos):
        fn, inputs = attention_inputs(cos)
        return lambda: grad_check_inputs(fn, inputs, max_elements=max_elements, seed=seed)

    yield "attention_cosine", attention(True)
    yield "attention_dot", attention(False)

    def stripe_attention():
        seed_all(seed)
        attn = CSwinAttention(6, 3, 3, bias_radius=2, tau_init=0.5).double()
        x = _randn(1, 5, 4, 4, 6, gen=gen)    # H = 5 forces stripe padding
        return _module_check(attn, lambda: attn(x).pow(2).mean(), max_elements, seed)

    yield "cswin_attention_padded", stripe_attention

    def block(norm_position):
        def run():
            seed_all(seed)
            blk = CSwinBlock(6, 3, 2, mlp_ratio=2.0, norm_position=norm_position, tau_init=0.5).double()
            x = _randn(2, 4, 4, 4, 6, gen=gen)
            return _module_check(blk, lambda: blk(x).pow(2).mean(), max_elements, seed)
        return run

    yield "cswin_block_pre", block("pre")
    yield "cswin_block_post", block("post")

    def conv_layers():
        seed_all(seed)
        net = nn.Sequential(
            nn.Conv3d(2, 3, 3, stride=2, padding=1), InstanceNorm(3), nn.LeakyReLU(0.01),
            nn.ConvTranspose3d(3, 2, 2, stride=2),
        ).double()
        x = _randn(1, 2, 6, 6, 4, gen=gen)
        # mean keeps f near 1 so the exactly-zero bias gradient under the norm stays above roundoff
        return _module_check(net, lambda: net(x).pow(2).mean(), max_elements, seed)

    yield "conv_norm_deconv", conv_layers

    def unet():
        seed_all(seed)
        model = CSwinUNet(small_unet_config()).double()
        x = _randn(1, 3, *unet_shape, gen=gen)
        target = (torch.rand(1, *unet_shape, generator=gen) < 0.1).long()
        # steep cosine softmax (tau ~ 0.1) raises curvature; a smaller step balances truncation and roundoff
        return _module_check(model, lambda: dice_focal_loss(model(x), target), unet_elements, seed, eps=3e-6)

    yield "unet_dice_focal", unet

    def contrastive():
        z = _randn(6, 8, gen=gen)
        return grad_check_inputs(lambda e: contrastive_loss(e, 0.5), [z], max_elements=max_elements, seed=seed)

    def restoration():
        a, b = _randn(2, 3, 4, 4, 2, gen=gen), _randn(2, 3, 4, 4, 2, gen=gen)
        return grad_check_inputs(restoration_loss, [a, b], max_elements=max_elements, seed=seed)

    def rotation():
        logits = _randn(6, 4, gen=gen)
        labels = torch.tensor([0, 1, 2, 3, 1, 2])
        return grad_check_inputs(lambda l: rotation_loss(l, labels), [logits], max_elements=max_elements, seed=seed)

    def awl():
        seed_all(seed)
        m = AutomaticWeightedLoss(3).double()
        with torch.no_grad():
            m.raw.copy_(_randn(3, gen=gen) * 0.5)
        losses = OrderedDict((f"loss{i}", torch.rand(1, generator=gen, dtype=torch.float64)[0].requires_grad_(True)) for i in range(3))
        params = OrderedDict(raw=m.raw, **losses)
        return grad_check(lambda: m(*losses.values()), params, max_elements=max_elements, seed=seed)

    def dice_focal():
        logits = _randn(2, 2, 4, 4, 3, gen=gen)
        target = (torch.rand(2, 4, 4, 3, generator=gen) < 0.3).long()
        return grad_check_inputs(lambda l: dice_focal_loss(torch.softmax(l, 1), target), [logits], max_elements=max_elements, seed=seed)

    yield "loss_contrastive", contrastive
    yield "loss_restoration", restoration
    yield "loss_rotation", rotation
    yield "loss_awl", awl
    yield "loss_dice_focal", dice_focal


def run_suite(seed: int = 0, max_elements: int = 32, tol: float = TOL, unet_shape=(32, 32, 16),
              unet_elements: int = 8) -> dict:
    """Run every check in float64; returns a JSON-ready report."""
    out = {"tol": tol, "seed": seed, "checks": {}}
    t0 = time.perf_counter()
    with float64_mode():
        for name, thunk in checks(seed, max_elements, unet_shape, unet_elements):
            t = time.perf_counter()
            rep = thunk()
            out["checks"][name] = {
                "max_rel_error": rep.worst,
                "per_parameter": rep.max_rel_error,
                "elements_checked": sum(rep.checked.values()),
                "nonfinite": rep.nonfinite,
                "kink_skips": sum(rep.kinks.values()),
                "passed": rep.ok(tol),
                "seconds": time.perf_counter() - t,
            }
    out["seconds"] = time.perf_counter() - t0
    out["passed"] = all(c["passed"] for c in out["checks"].values())
    return out
