"""Layout evaluation: matching-based IoU similarity, geometric fidelity
scores, manifold density/coverage, constraint violation, and a Frechet
distance over pluggable layout features.

The feature extractor used for the Frechet score is the package's own
denoiser (mean-pooled final hidden state at t=1), which makes scores
self-consistent for comparisons within this codebase but not comparable to
numbers produced with other extractors.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment

from . import kernels
from .constraints import relation_loss
from .core import Layout, flatten
from .denoiser import Denoiser
from .errors import DataError
from .vocab import Vocabulary

DOCSIM_DISTANCE_DECAY = 2.0  # weight halves every 1/decay of canvas diagonal


# ---------------------------------------------------------------------------
# maximum IoU
# ---------------------------------------------------------------------------

def _signature(layout: Layout) -> tuple:
    return tuple(sorted(e.category for e in layout.elements))


def max_iou_pair(a: Layout, b: Layout) -> float:
    """Optimal same-category matching that maximizes mean element IoU."""
    if _signature(a) != _signature(b):
        raise DataError("CATEGORY_MISMATCH",
                        "layouts must share an identical category multiset")
    if len(a) == 0:
        return 1.0
    boxes_a, boxes_b = a.boxes(), b.boxes()
    cats_a, cats_b = a.categories(), b.categories()
    total = 0.0
    for cat in np.unique(cats_a):
        ia = np.flatnonzero(cats_a == cat)
        ib = np.flatnonzero(cats_b == cat)
        iou = kernels.pairwise_iou(boxes_a[ia], boxes_b[ib])
        rows, cols = linear_sum_assignment(-iou)
        total += iou[rows, cols].sum()
    return float(total / len(a))


def max_iou_collection(generated, reference) -> float:
    """Optimal matching between two collections, restricted to pairs with
    identical category multisets; unmatched layouts score zero."""
    if not generated or not reference:
        return 0.0
    by_sig_gen: dict = {}
    by_sig_ref: dict = {}
    for i, lay in enumerate(generated):
        by_sig_gen.setdefault(_signature(lay), []).append(i)
    for j, lay in enumerate(reference):
        by_sig_ref.setdefault(_signature(lay), []).append(j)
    total = 0.0
    for sig, gi in by_sig_gen.items():
        rj = by_sig_ref.get(sig)
        if not rj:
            continue
        w = np.zeros((len(gi), len(rj)))
        for a, i in enumerate(gi):
            for b, j in enumerate(rj):
                w[a, b] = max_iou_pair(generated[i], reference[j])
        rows, cols = linear_sum_assignment(-w)
        total += w[rows, cols].sum()
    return float(total / max(len(generated), len(reference)))


# ---------------------------------------------------------------------------
# geometric fidelity
# ---------------------------------------------------------------------------

def _axis_values(boxes: np.ndarray) -> np.ndarray:
    cx, cy, w, h = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    return np.stack([cx - w / 2, cx, cx + w / 2, cy - h / 2, cy, cy + h / 2], axis=1)


def alignment(layout: Layout) -> float:
    """Mean -log(1 - d) over elements, where d is the closest axis-wise
    distance to any other element; reported on a x100 scale."""
    e = len(layout)
    if e <= 1:
        return 0.0
    ax = _axis_values(layout.boxes())
    score = 0.0
    for i in range(e):
        diff = np.abs(ax[i][None, :] - np.delete(ax, i, axis=0))
        score += -np.log(1.0 - diff.min())
    return float(100.0 * score / e)


def overlap(layout: Layout) -> float:
    """Mean fraction of each element's own area covered by other elements
    (pairwise intersections summed, clipped at the element's area)."""
    e = len(layout)
    if e <= 1:
        return 0.0
    boxes = layout.boxes()
    x0, x1 = boxes[:, 0] - boxes[:, 2] / 2, boxes[:, 0] + boxes[:, 2] / 2
    y0, y1 = boxes[:, 1] - boxes[:, 3] / 2, boxes[:, 1] + boxes[:, 3] / 2
    iw = np.maximum(np.minimum(x1[:, None], x1[None, :])
                    - np.maximum(x0[:, None], x0[None, :]), 0.0)
    ih = np.maximum(np.minimum(y1[:, None], y1[None, :])
                    - np.maximum(y0[:, None], y0[None, :]), 0.0)
    inter = iw * ih
    np.fill_diagonal(inter, 0.0)
    area = boxes[:, 2] * boxes[:, 3]
    covered = np.minimum(inter.sum(axis=1), area)
    return float(np.mean(covered / area))


def docsim(a: Layout, b: Layout) -> float:
    """Optimal-matching similarity with weights
    min(area) * 2^(-decay * center distance) over same-category pairs."""
    if len(a) == 0 or len(b) == 0:
        return 0.0
    boxes_a, boxes_b = a.boxes(), b.boxes()
    cats_a, cats_b = a.categories(), b.categories()
    area_a = boxes_a[:, 2] * boxes_a[:, 3]
    area_b = boxes_b[:, 2] * boxes_b[:, 3]
    dist = np.hypot(boxes_a[:, 0][:, None] - boxes_b[:, 0][None, :],
                    boxes_a[:, 1][:, None] - boxes_b[:, 1][None, :])
    w = np.minimum(area_a[:, None], area_b[None, :]) \
        * np.exp2(-DOCSIM_DISTANCE_DECAY * dist)
    w[cats_a[:, None] != cats_b[None, :]] = 0.0
    rows, cols = linear_sum_assignment(-w)
    return float(w[rows, cols].sum() / max(len(a), len(b)))


# ---------------------------------------------------------------------------
# feature-space metrics
# ---------------------------------------------------------------------------

class FeatureExtractor(Protocol):
    def __call__(self, layout: Layout) -> np.ndarray: ...


class DenoiserFeatureExtractor:
    """Features from a trained denoiser: mean-pooled final hidden state at
    t=1 over the uncorrupted, unshuffled sequence."""

    def __init__(self, model: Denoiser, vocab: Vocabulary):
        self.model = model
        self.vocab = vocab

    def __call__(self, layout: Layout) -> np.ndarray:
        toks = flatten(layout, self.vocab, self.model.config.max_elements)
        return np.asarray(self.model.features(toks), dtype=float)


def extract_features(layouts, extractor: FeatureExtractor) -> np.ndarray:
    return np.stack([extractor(lay) for lay in layouts])


def fid_from_features(feat_a: np.ndarray, feat_b: np.ndarray,
                      eps: float = 1e-6) -> float:
    """Frechet distance between Gaussians fitted to two feature sets."""
    feat_a = np.atleast_2d(np.asarray(feat_a, dtype=float))
    feat_b = np.atleast_2d(np.asarray(feat_b, dtype=float))
    if feat_a.shape[0] < 2 or feat_b.shape[0] < 2:
        raise DataError("TOO_FEW_POINTS", "need at least two samples per side")
    mu_a, mu_b = feat_a.mean(axis=0), feat_b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(feat_a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(feat_b, rowvar=False))
    with np.errstate(invalid="ignore", divide="ignore"):
        covmean, _ = scipy.linalg.sqrtm(cov_a @ cov_b, disp=False)
        if not np.isfinite(covmean).all():
            # SINGULAR_COVARIANCE: retry on regularized covariances
            reg = eps * np.eye(cov_a.shape[0])
            covmean, _ = scipy.linalg.sqrtm((cov_a + reg) @ (cov_b + reg), disp=False)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b)
                 - 2.0 * np.trace(covmean))


def fid(generated, reference, extractor: FeatureExtractor) -> float:
    return fid_from_features(extract_features(generated, extractor),
                             extract_features(reference, extractor))


def density_coverage(gen_feats: np.ndarray, ref_feats: np.ndarray,
                     k: int = 5) -> tuple:
    """k-NN manifold estimates: density (fidelity) and coverage (diversity)."""
    gen_feats = np.atleast_2d(np.asarray(gen_feats, dtype=float))
    ref_feats = np.atleast_2d(np.asarray(ref_feats, dtype=float))
    if len(ref_feats) < k + 1 or len(gen_feats) < k + 1:
        raise DataError("TOO_FEW_POINTS", f"need more than {k} points per side")
    rr = np.linalg.norm(ref_feats[:, None, :] - ref_feats[None, :, :], axis=-1)
    np.fill_diagonal(rr, np.inf)
    radius = np.sort(rr, axis=1)[:, k - 1]  # k-th nearest among other refs
    gr = np.linalg.norm(gen_feats[:, None, :] - ref_feats[None, :, :], axis=-1)
    inside = gr <= radius[None, :]
    density = float(inside.sum(axis=1).mean() / k)
    coverage = float((inside.any(axis=0)).mean())
    return density, coverage


# ---------------------------------------------------------------------------
# constraint violation
# ---------------------------------------------------------------------------

def violation_rate(layouts, constraints_per_layout, eps: float = 1e-9) -> float:
    """Fraction of (layout, constraint) pairs with a positive penalty."""
    total = 0
    violated = 0
    for lay, cons in zip(layouts, constraints_per_layout):
        boxes = lay.boxes()
        for c in cons:
            loss, _ = relation_loss(boxes, [c])
            total += 1
            violated += loss > eps
    return float(violated / total) if total else 0.0


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    metrics: dict
    n_generated: int
    n_reference: int = 0
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"metrics": self.metrics, "n_generated": self.n_generated,
                           "n_reference": self.n_reference, "config": self.config},
                          sort_keys=True, indent=2)

    def to_table(self) -> str:
        width = max((len(k) for k in self.metrics), default=8)
        lines = [f"{'metric'.ljust(width)}  value",
                 f"{'-' * width}  -----"]
        for k in sorted(self.metrics):
            lines.append(f"{k.ljust(width)}  {self.metrics[k]:.6g}")
        return "\n".join(lines)


def category_histogram(layouts, categories: int) -> np.ndarray:
    counts = Counter()
    for lay in layouts:
        counts.update(e.category for e in lay.elements)
    hist = np.array([counts.get(c, 0) for c in range(1, categories + 1)], dtype=float)
    return hist / hist.sum() if hist.sum() else hist


def evaluate(generated, reference=None, extractor: FeatureExtractor | None = None,
             k: int = 5, config: dict | None = None) -> MetricReport:
    """Assemble the standard metric report for a batch of layouts."""
    metrics = {
        "alignment": float(np.mean([alignment(l) for l in generated])),
        "overlap": float(np.mean([overlap(l) for l in generated])),
        "mean_elements": float(np.mean([len(l) for l in generated])),
    }
    n_ref = 0
    if reference:
        n_ref = len(reference)
        metrics["max_iou"] = max_iou_collection(generated, reference)
        if extractor is not None:
            gf = extract_features(generated, extractor)
            rf = extract_features(reference, extractor)
            metrics["fid_surrogate"] = fid_from_features(gf, rf)
            if min(len(gf), len(rf)) > k:
                d, c = density_coverage(gf, rf, k)
                metrics["density"] = d
                metrics["coverage"] = c
    return MetricReport(metrics, len(generated), n_ref, config or {})
