"""End-to-end acceptance checks; the terminal summary prints one PASS/FAIL line per criterion."""
import itertools
import json
import math
import shutil
import time
import warnings

import numpy as np
import pytest
import torch
from fractions import Fraction

from cswin_detect.attention import CSwinAttention
from cswin_detect.cli import main
from cswin_detect.data import SynthConfig, make_phantom, preprocess
from cswin_detect.evaluation import (auroc, average_precision_from, evaluate, evaluate_case, extract_candidates,
                                     holm_bonferroni, wilcoxon_signed_rank)
from cswin_detect.finetune import FinetuneConfig, finetune, predict_probs
from cswin_detect.gradsuite import TOL, run_suite
from cswin_detect.losses import awl_combine, contrastive_loss, rotation_loss
from cswin_detect.numeric import float64_mode, numpy_rng
from cswin_detect.pretrain import PretrainConfig, pretrain, rotation_accuracy, save_pretrained
from oracles import (ap_scenario, blob_with_faint_tail, enumerated_ap, enumerated_wilcoxon, full_window_reference,
                     jacobian_support, normal_grid, pair_auroc)

DESK_MODEL = dict(feature_size=12, anisotropic=True)


def criterion(n):
    return pytest.mark.criterion(n)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def _stack(phantoms, cfg):
    pc = cfg.preprocess_config()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        X = np.stack([preprocess(p.volume, pc).data for p in phantoms])
    return X, np.stack([p.mask for p in phantoms])


# -- 1 ---------------------------------------------------------------------------

@criterion(1)
def test_gradient_suite(detail):
    report = run_suite(seed=0)
    worst = max(c["max_rel_error"] for c in report["checks"].values())
    detail(f"{len(report['checks'])} checks, worst rel err {worst:.1e}, {report['seconds']:.0f} s")
    failed = [k for k, v in report["checks"].items() if not v["passed"]]
    assert not failed and worst < TOL
    assert report["seconds"] < 300


# -- 2 ---------------------------------------------------------------------------

@criterion(2)
@pytest.mark.parametrize("sw", [4, 5])
def test_wide_stripes_match_full_window_attention(sw, detail):
    with float64_mode(), torch.no_grad():
        torch.manual_seed(11)
        attn = CSwinAttention(12, 6, sw, tau_init=0.5).double()
        x = normal_grid((2, 4, 4, 4, 12), 12)
        err = float((attn(x) - full_window_reference(attn, x)).abs().max())
    detail(f"sw={sw} max abs err {err:.1e}")
    assert err < 1e-5


@criterion(2)
def test_sw1_gradient_support_is_the_cross():
    with float64_mode():
        torch.manual_seed(12)
        attn = CSwinAttention(6, 3, 1, tau_init=0.5).double()
        for target in [(2, 1, 3), (0, 3, 0)]:
            support = jacobian_support(attn, (4, 4, 4), target)
            for pos in itertools.product(range(4), repeat=3):
                on_cross = any(p == t for p, t in zip(pos, target))
                assert (support[pos] > 0) == on_cross, (target, pos)


# -- 3 ---------------------------------------------------------------------------

@criterion(3)
def test_closed_form_losses():
    f64 = dict(dtype=torch.float64)
    assert abs(float(contrastive_loss(torch.ones(6, 16, **f64), 0.5)) - math.log(5)) < 1e-6
    assert abs(float(contrastive_loss(torch.ones(4, 16, **f64), 0.5)) - math.log(3)) < 1e-6
    assert abs(float(rotation_loss(torch.zeros(8, 4, **f64), torch.arange(8) % 4)) - math.log(4)) < 1e-6
    l = torch.tensor([0.3, 1.7, 0.9], **f64)
    got = awl_combine(*l, c=torch.ones(3, **f64))
    assert abs(float(got) - (0.5 * float(l.sum()) + math.log(8))) < 1e-6
    for c1, l1 in [(0.4, 1.2), (1.0, 0.3), (2.2, 2.0)]:
        c = torch.tensor([c1, 0.8, 1.5], **f64, requires_grad=True)
        awl_combine(torch.tensor(l1, **f64), l[1], l[2], c=c).backward()
        assert abs(float(c.grad[0]) - (-l1 / c1 ** 3 + 2 * c1 / (1 + c1 ** 2))) < 1e-6


# -- 4 ---------------------------------------------------------------------------

def _voxels(c):
    return {tuple(v) for v in c.voxels.tolist()}


@criterion(4)
def test_one_and_two_blob_constructions():
    m, thr = blob_with_faint_tail((20, 20, 12), (9.4, 10.2, 5.7), 0.8, 2.2)
    (c,) = extract_candidates(m)
    assert c.confidence == m.max()
    assert _voxels(c) == {tuple(v) for v in np.argwhere(m >= thr).tolist()}

    a, ta = blob_with_faint_tail((28, 12, 8), (6, 6, 4), 0.9, 1.6)
    b, tb = blob_with_faint_tail((28, 12, 8), (21, 5, 3), 0.6, 1.6)
    a[14:] = 0
    b[:14] = 0
    c1, c2 = extract_candidates(a + b)
    assert (c1.confidence, c2.confidence) == (0.9, 0.6)
    assert _voxels(c1) == {tuple(v) for v in np.argwhere(a >= ta).tolist()}
    assert _voxels(c2) == {tuple(v) for v in np.argwhere(b >= tb).tolist()}


@criterion(4)
def test_extraction_terminates_fast_on_random_map(detail):
    m = numpy_rng(0).random((64, 64, 64))
    extract_candidates(m[:8, :8, :8])          # compile outside the timed region
    t = time.perf_counter()
    cands = extract_candidates(m)
    dt = time.perf_counter() - t
    detail(f"64^3 random map: {len(cands)} candidates in {dt:.2f} s")
    assert dt < 1.0
    assert sum(c.size for c in cands) <= m.size


# -- 5 ---------------------------------------------------------------------------

@criterion(5)
def test_auroc_matches_pair_counting_on_20_sets():
    for seed in range(20):
        g = numpy_rng(100 + seed)
        labels = np.r_[0, 1, g.integers(0, 2, int(g.integers(3, 40)))]
        scores = np.round(g.random(len(labels)), 1)
        assert auroc(labels, scores) == float(pair_auroc(labels, scores))


@criterion(5)
def test_ap_matches_enumeration_on_10_scenarios():
    for seed in range(10):
        conf, is_tp, n_gt = ap_scenario(100 + seed)
        assert Fraction(average_precision_from(conf, is_tp, n_gt)) == pytest.approx(enumerated_ap(conf, is_tp, n_gt), abs=1e-15)


@criterion(5)
def test_wilcoxon_exact_matches_enumeration_and_holm_example():
    for n in range(5, 13):          # the exact test needs at least 5 nonzero deltas
        d = np.round(numpy_rng(200 + n).normal(size=n), 2)
        d[d == 0] = 0.5
        assert wilcoxon_signed_rank(d) == enumerated_wilcoxon(d)
    assert holm_bonferroni([0.001, 0.0026, 0.03]) == [True, False, False]
    assert holm_bonferroni([0.0001, 0.0024, 0.004]) == [True, True, True]


# -- 6 ---------------------------------------------------------------------------

@criterion(6)
@pytest.mark.slow
def test_overfit_one_phantom(detail):
    cfg = SynthConfig(negative_fraction=0.0)
    X, y = _stack([make_phantom(cfg, 0, 0)], cfg)
    ft = FinetuneConfig(epochs=500, lr=1e-3, warmup_epochs=10, batch=1, model=DESK_MODEL, seed=0)
    res = finetune(X, y, ft, X, y, max_steps=500)
    detail(f"6a soft dice {res.history[-1]['val_dice']:.3f} after {res.steps} steps")
    assert res.steps <= 500 and res.history[-1]["val_dice"] > 0.8


@criterion(6)
@pytest.mark.slow
def test_ssl_rotation_accuracy_on_held_out(detail):
    cfg = SynthConfig()
    X, _ = _stack([make_phantom(cfg, 1, i) for i in range(48)], cfg)
    res = pretrain(X[:32], PretrainConfig(epochs=30, batch=8, warmup_epochs=2, model=DESK_MODEL, seed=0))
    acc = rotation_accuracy(res.model, X[32:])
    detail(f"6b held-out rotation accuracy {acc:.3f}")
    assert acc > 0.9


# Harder phantoms than the defaults: with the default contrast both inits reach
# lesion AP 1.0 within a few epochs, which leaves nothing to compare.
HARD = dict(lesion_contrast=(0.1, 0.4), noise=0.3, max_distractors=4, lesion_radius=(1.5, 3.0))


@pytest.fixture(scope="module")
def init_comparison(tmp_path_factory):
    """Finetune from random and from pretrained init on the same labeled quarter, budget and seed."""
    cfg = SynthConfig(**HARD)
    X, y = _stack([make_phantom(cfg, 5, i) for i in range(64)], cfg)
    val, unlabeled, labeled = np.arange(48, 64), np.arange(48), np.arange(16)
    ckpt = tmp_path_factory.mktemp("ssl") / "ssl.ckpt"
    pcfg = PretrainConfig(epochs=30, batch=8, warmup_epochs=2, model=DESK_MODEL, seed=0)
    save_pretrained(ckpt, pretrain(X[unlabeled], pcfg), pcfg)
    out = {}
    for name, init in (("random", "random"), ("pretrained", str(ckpt))):
        ft = FinetuneConfig(init=init, epochs=8, lr=1e-3, warmup_epochs=2, batch=2, model=DESK_MODEL, seed=0)
        res = finetune(X[labeled], y[labeled], ft, X[val], y[val])
        P = predict_probs(res.model, X[val])
        ap = evaluate([evaluate_case(str(i), P[k], y[i]) for k, i in enumerate(val)])["ap"]
        out[name] = (ap, [h["val_loss"] for h in res.history])
    return out


@criterion(6)
@pytest.mark.slow
def test_pretrained_init_beats_random_init(init_comparison, detail):
    ap_pre, ap_rand = init_comparison["pretrained"][0], init_comparison["random"][0]
    detail(f"6c val AP pretrained {ap_pre:.3f} vs random {ap_rand:.3f}")
    assert ap_pre > ap_rand


@pytest.mark.slow
def test_pretrained_init_reaches_random_final_val_loss_sooner(init_comparison):
    target = init_comparison["random"][1][-1]
    losses = init_comparison["pretrained"][1]
    first = next((e for e, l in enumerate(losses, 1) if l <= target), None)
    assert first is not None and first < len(losses)


# -- 7 and 8 ---------------------------------------------------------------------

def _cli(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, argv


def _pipeline(root, data, model=DESK_MODEL, weighting="awl", seed=0):
    root.mkdir(parents=True, exist_ok=True)
    pre, ft = root / "pre.json", root / "ft.json"
    pre.write_text(json.dumps({"epochs": 3, "batch": 4, "warmup_epochs": 1, "embed_dim": 32,
                               "loss_weighting": weighting, "model": model}))
    ft.write_text(json.dumps({"epochs": 4, "lr": 1e-3, "warmup_epochs": 1, "model": model, "labeled_fraction": 0.5}))
    _cli("pretrain", "--data", data, "--out", root / "ssl.ckpt", "--config", pre, "--seed", seed)
    _cli("finetune", "--data", data, "--out", root / "model.ckpt", "--init", root / "ssl.ckpt", "--config", ft, "--seed", seed)
    _cli("predict", "--checkpoint", root / "model.ckpt", "--data", data, "--out", root / "pred")
    _cli("eval", "--pred", root / "pred", "--data", data, "--out", root / "metrics.json")
    return root


@pytest.fixture(scope="module")
def desk_corpus(tmp_path_factory):
    data = tmp_path_factory.mktemp("corpus")
    _cli("synth", "--n", 16, "--seed", 3, "--out", data)
    return data


ABLATIONS = {
    "baseline": (DESK_MODEL, "awl"),
    "dot_product": ({**DESK_MODEL, "use_cosine": False}, "awl"),
    "fixed_sw2": ({**DESK_MODEL, "stripe_widths": [2, 2, 2, 2]}, "awl"),
    "equal_weight": (DESK_MODEL, "equal"),
}


@criterion(7)
@pytest.mark.slow
def test_ablations_train_and_emit_comparable_metrics(tmp_path, desk_corpus, detail):
    keys = None
    summary = []
    for name, (model, weighting) in ABLATIONS.items():
        root = _pipeline(tmp_path / name, desk_corpus, model, weighting)
        for h in json.loads((root / "ssl.ckpt.history.json").read_text()):
            assert all(math.isfinite(v) for k, v in h.items() if isinstance(v, float))
        for h in json.loads((root / "model.ckpt.history.json").read_text()):
            assert math.isfinite(h["train_loss"])
        metrics = json.loads((root / "metrics.json").read_text())
        keys = keys or set(metrics)
        assert set(metrics) == keys and metrics["ap"] is not None
        summary.append(f"{name} ap {metrics['ap']:.2f}")
    detail(", ".join(summary))


@criterion(8)
@pytest.mark.slow
def test_identical_runs_are_bit_identical(tmp_path, desk_corpus, detail):
    # same paths for both runs: the init checkpoint path is part of the finetune config
    runs = []
    for _ in range(2):
        root = _pipeline(tmp_path / "run", desk_corpus, seed=4)
        runs.append({p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()})
        shutil.rmtree(root)
    a, b = runs
    assert {"ssl.ckpt", "model.ckpt", "metrics.json"} <= set(a)
    assert a.keys() == b.keys()
    differing = [k for k in a if a[k] != b[k]]
    detail(f"{len(a)} artifacts byte-identical" if not differing else f"differ: {differing}")
    assert not differing
