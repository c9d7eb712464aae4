"""Lesion candidates, lesion matching, AUROC / AP and the significance tests."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import ndimage, stats

MIN_PEAK = 0.05
TP_DICE = 0.1


def _structure(connectivity: int) -> np.ndarray:
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)


@dataclass
class LesionCandidate:
    voxels: np.ndarray      # (k, 3) int indices
    confidence: float

    @property
    def size(self) -> int:
        return len(self.voxels)

    def flat(self, shape) -> np.ndarray:
        return np.ravel_multi_index(tuple(self.voxels.T), shape)


@numba.njit(cache=True)
def _peel(work, order, rel_threshold, min_peak, offsets):
    nx, ny, nz = work.shape
    flat = work.ravel()
    owner = np.zeros(flat.size, dtype=np.int32)
    stack = np.empty(flat.size, dtype=np.int64)
    peaks = []
    for idx in order:
        if owner[idx] != 0:
            continue
        peak = flat[idx]
        if peak <= 0.0 or peak < min_peak:
            break
        label = len(peaks) + 1
        peaks.append(peak)
        thr = rel_threshold * peak
        owner[idx] = label
        stack[0] = idx
        top = 1
        while top > 0:
            top -= 1
            v = stack[top]
            x = v // (ny * nz)
            y = (v // nz) % ny
            z = v % nz
            for o in range(offsets.shape[0]):
                a = x + offsets[o, 0]
                b = y + offsets[o, 1]
                c = z + offsets[o, 2]
                if a < 0 or a >= nx or b < 0 or b >= ny or c < 0 or c >= nz:
                    continue
                u = (a * ny + b) * nz + c
                if owner[u] == 0 and flat[u] >= thr:
                    owner[u] = label
                    stack[top] = u
                    top += 1
    return owner, peaks


def extract_candidates(det_map, rel_threshold: float = 0.4, min_peak: float = MIN_PEAK, connectivity: int = 26):
    """Peel lesion candidates off a detection map, highest peak first.

    Each candidate is the connected component containing the current peak
    ``p`` among voxels ``>= rel_threshold * p`` that no earlier candidate
    claimed; claimed voxels count as zero afterwards. Stops once the
    remaining peak falls below ``min_peak``.
    """
    work = np.ascontiguousarray(det_map, dtype=np.float64)
    if work.ndim != 3:
        raise ValueError(f"detection map must be 3D, got shape {work.shape}")
    offsets = np.argwhere(_structure(connectivity)) - 1
    offsets = offsets[np.any(offsets != 0, axis=1)].astype(np.int64)
    # unclaimed voxels keep their value, so the next peak is the next unclaimed one in this order
    order = np.argsort(-work.ravel(), kind="stable")
    owner, peaks = _peel(work, order, float(rel_threshold), float(min_peak), offsets)
    if not len(peaks):
        return []
    labels = owner.reshape(work.shape)
    flat = owner
    srt = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[srt], np.arange(1, len(peaks) + 2))
    return [
        LesionCandidate(np.stack(np.unravel_index(np.sort(srt[bounds[i]:bounds[i + 1]]), labels.shape), axis=1), float(p))
        for i, p in enumerate(peaks)
    ]


def extract_candidates_reference(det_map, rel_threshold=0.4, min_peak=MIN_PEAK, connectivity=26):
    """Literal relabel-per-peak version; slow, kept as a cross-check."""
    work = np.array(det_map, dtype=np.float64, copy=True)
    structure = _structure(connectivity)
    cands = []
    while True:
        idx = int(np.argmax(work))
        peak = float(work.flat[idx])
        if peak <= 0 or peak < min_peak:
            break
        labels, _ = ndimage.label(work >= rel_threshold * peak, structure)
        comp = labels == labels.flat[idx]
        cands.append(LesionCandidate(np.argwhere(comp), peak))
        work[comp] = 0.0
    return cands


def candidates_to_map(shape, cands) -> np.ndarray:
    """Lesion-wise detection map: each candidate's voxels carry its confidence."""
    out = np.zeros(shape, dtype=np.float32)
    for c in cands:
        out[tuple(c.voxels.T)] = c.confidence
    return out


def gt_components(gt_mask, connectivity: int = 26) -> list[np.ndarray]:
    """Split a binary mask into flat-index arrays of its connected lesions."""
    gt = np.asarray(gt_mask) > 0
    labels, n = ndimage.label(gt, _structure(connectivity))
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(1, n + 2))
    return [np.sort(order[bounds[i]:bounds[i + 1]]) for i in range(n)]


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice between two sets of flat voxel indices."""
    if len(a) + len(b) == 0:
        return 0.0
    return 2.0 * len(np.intersect1d(a, b, assume_unique=True)) / (len(a) + len(b))


@dataclass
class EvalRecord:
    case_id: str
    label: int
    score: float
    candidates: list = field(default_factory=list)   # (confidence, gt index or None, dice)
    gt_matched: list = field(default_factory=list)

    @property
    def n_gt(self) -> int:
        return len(self.gt_matched)

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "label": self.label,
            "score": self.score,
            "candidates": [{"confidence": c, "gt": g, "dice": d} for c, g, d in self.candidates],
            "gt_matched": list(self.gt_matched),
        }


def match_lesions(cands, gt, shape=None, min_dice: float = TP_DICE):
    """Greedy confidence-ordered matching of candidates to GT lesions.

    ``gt`` is a binary mask or a list of flat-index arrays (then ``shape``
    is required). Returns ``(candidate_rows, gt_matched)`` where each row is
    ``(confidence, matched gt index or None, dice)``.
    """
    if not isinstance(gt, list):
        shape = np.shape(gt)
        gt = gt_components(gt)
    matched = [False] * len(gt)
    rows = []
    for c in sorted(cands, key=lambda c: -c.confidence):
        flat = np.sort(c.flat(shape))
        best, best_d = None, 0.0
        for j, les in enumerate(gt):
            if matched[j]:
                continue
            d = dice(flat, les)
            if d > best_d:
                best, best_d = j, d
        if best is not None and best_d >= min_dice:
            matched[best] = True
            rows.append((c.confidence, best, best_d))
        else:
            rows.append((c.confidence, None, best_d))
    return rows, matched


def patient_score(cands) -> float:
    return max((c.confidence for c in cands), default=0.0)


@dataclass
class EvalSettings:
    rel_threshold: float = 0.4
    min_peak: float = MIN_PEAK
    connectivity: int = 26
    min_dice: float = TP_DICE


def evaluate_case(case_id, det_map, gt_mask, rel_threshold=0.4, min_peak=MIN_PEAK, connectivity=26,
                  min_dice=TP_DICE) -> EvalRecord:
    if np.shape(det_map) != np.shape(gt_mask):
        raise ValueError(f"{case_id}: detection map {np.shape(det_map)} and mask {np.shape(gt_mask)} differ in shape")
    cands = extract_candidates(det_map, rel_threshold, min_peak, connectivity)
    gts = gt_components(gt_mask, connectivity)
    rows, matched = match_lesions(cands, gts, np.shape(gt_mask), min_dice)
    return EvalRecord(str(case_id), int(len(gts) > 0), patient_score(cands), rows, matched)


# -- patient-level ROC ------------------------------------------------------

def _split_classes(labels, scores):
    labels = np.asarray(labels).astype(int)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise ValueError(f"labels {labels.shape} and scores {scores.shape} differ in shape")
    pos, neg = scores[labels == 1], scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUROC needs both positive and negative cases")
    return pos, neg


def auroc(labels, scores) -> float:
    """Mann-Whitney AUROC: P(score+ > score-) + 0.5 P(tie)."""
    pos, neg = _split_classes(labels, scores)
    neg = np.sort(neg)
    less = np.searchsorted(neg, pos, side="left")
    leq = np.searchsorted(neg, pos, side="right")
    twice_u = int((2 * less + (leq - less)).sum())
    return twice_u / (2 * len(pos) * len(neg))


def roc_curve(labels, scores):
    """(fpr, tpr, thresholds) at every distinct score, descending."""
    pos, neg = _split_classes(labels, scores)
    thr = np.unique(np.concatenate([pos, neg]))[::-1]
    tpr = np.array([(pos >= t).mean() for t in thr])
    fpr = np.array([(neg >= t).mean() for t in thr])
    return np.r_[0.0, fpr], np.r_[0.0, tpr], np.r_[np.inf, thr]


# -- lesion-level PR --------------------------------------------------------

def pool_detections(records):
    """All candidates across cases as (confidences, is_tp) plus the GT count."""
    conf, tp, n_gt = [], [], 0
    for r in records:
        n_gt += r.n_gt
        for c, g, _ in r.candidates:
            conf.append(c)
            tp.append(g is not None)
    return np.asarray(conf, dtype=np.float64), np.asarray(tp, dtype=bool), n_gt


def precision_recall_curve(conf, is_tp, n_gt):
    """Precision/recall at each distinct confidence threshold, descending."""
    if n_gt <= 0:
        raise ValueError("average precision needs at least one ground-truth lesion")
    conf = np.asarray(conf, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    if len(conf) == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    order = np.argsort(-conf, kind="stable")
    c, t = conf[order], is_tp[order]
    tp_cum = np.cumsum(t)
    # last index of each tie block
    last = np.r_[np.nonzero(c[1:] != c[:-1])[0], len(c) - 1]
    tps = tp_cum[last]
    n_pred = last + 1
    return tps / n_pred, tps / n_gt, c[last]


def average_precision_from(conf, is_tp, n_gt) -> float:
    precision, recall, _ = precision_recall_curve(conf, is_tp, n_gt)
    prev = np.r_[0.0, recall[:-1]]
    return float(((recall - prev) * precision).sum())


def average_precision(records) -> float:
    """Step-integrated area under the pooled lesion-level PR curve."""
    return average_precision_from(*pool_detections(records))


# -- significance tests -----------------------------------------------------

def _signed_rank_setup(deltas):
    d = np.asarray(deltas, dtype=np.float64)
    if d.size == 0 or np.all(d == 0):
        raise ValueError("all deltas are zero; signed-rank test undefined")
    d = d[d != 0]
    if d.size < 5:
        raise ValueError(f"signed-rank test needs at least 5 nonzero deltas, got {d.size}")
    # average ranks are half-integers, so doubled ranks are exact integers
    ranks2 = np.rint(2 * stats.rankdata(np.abs(d))).astype(np.int64)
    return d, ranks2


def wilcoxon_signed_rank(deltas, exact_max_n: int = 12) -> float:
    """Two-sided p-value of the Wilcoxon signed-rank test.

    Zero deltas are dropped. Exact null distribution for ``n <= exact_max_n``,
    normal approximation with tie correction above that.
    """
    d, ranks2 = _signed_rank_setup(deltas)
    n = d.size
    w2 = int(ranks2[d > 0].sum())
    total2 = int(ranks2.sum())
    if n <= exact_max_n:
        counts = {0: 1}
        for r in ranks2.tolist():
            nxt = dict(counts)
            for s, k in counts.items():
                nxt[s + r] = nxt.get(s + r, 0) + k
            counts = nxt
        obs = abs(2 * w2 - total2)
        extreme = sum(k for s, k in counts.items() if abs(2 * s - total2) >= obs)
        return min(1.0, extreme / 2 ** n)
    w = w2 / 2
    mean = n * (n + 1) / 4
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - (tie_counts ** 3 - tie_counts).sum() / 48
    z = (w - mean) / math.sqrt(var)
    return float(min(1.0, 2 * stats.norm.sf(abs(z))))


def holm_bonferroni(pvalues, alpha: float = 0.005) -> list[bool]:
    """Step-down Holm rejection flags, in the input order."""
    p = np.asarray(pvalues, dtype=np.float64)
    m = p.size
    flags = [False] * m
    for i, j in enumerate(np.argsort(p, kind="stable")):
        if p[j] <= alpha / (m - i):
            flags[j] = True
        else:
            break
    return flags


# -- aggregate report -------------------------------------------------------

def evaluate(records) -> dict:
    """Metrics document: auroc, ap, per-case rows and both curves."""
    labels = [r.label for r in records]
    scores = [r.score for r in records]
    out = {"per_case": [r.to_dict() for r in records]}
    if 0 < sum(labels) < len(labels):
        out["auroc"] = auroc(labels, scores)
        fpr, tpr, thr = roc_curve(labels, scores)
        out["roc_curve"] = [{"fpr": float(a), "tpr": float(b), "threshold": float(t) if np.isfinite(t) else None}
                            for a, b, t in zip(fpr, tpr, thr)]
    else:
        out["auroc"] = None
        out["roc_curve"] = []
    conf, tp, n_gt = pool_detections(records)
    if n_gt:
        prec, rec, thr = precision_recall_curve(conf, tp, n_gt)
        out["ap"] = average_precision_from(conf, tp, n_gt)
        out["pr_curve"] = [{"recall": float(r), "precision": float(p), "threshold": float(t)}
                           for p, r, t in zip(prec, rec, thr)]
    else:
        out["ap"] = None
        out["pr_curve"] = []
    return out
