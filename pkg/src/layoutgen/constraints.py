"""Weak-constraint machinery: hard-coded geometry priors and differentiable
relation penalties used for logit adjustment during sampling.

Relation penalties operate on continuous boxes (cx, cy, w, h).  A penalty of
zero means the constraint is satisfied; positive values measure violation.
All penalties are piecewise differentiable and expose analytic gradients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError, PriorWindowWarning
from .vocab import GEOMETRIC, Vocabulary

# prior kinds
REFINE_DEFAULT = "default"
REFINE_GAUSSIAN = "gaussian"
REFINE_NEGATION = "negation"
LOSS_GUIDED = "loss_guided"

# relation kinds
LARGER = "larger"
SMALLER = "smaller"
EQUAL_SIZE = "equal"
ABOVE = "above"
BELOW = "below"
LEFT = "left"
RIGHT = "right"
AREA = "area"
ASPECT = "aspect"
READING_ORDER = "reading_order"

PAIR_KINDS = (LARGER, SMALLER, EQUAL_SIZE, ABOVE, BELOW, LEFT, RIGHT, READING_ORDER)
TARGET_KINDS = (AREA, ASPECT)

REL_TOLERANCE = 0.1  # slack on size comparisons, distinct from the schedule's mask rate


@dataclass(frozen=True)
class RelationConstraint:
    """Pairwise or targeted geometric requirement between elements.

    For pair kinds the semantics read "element j is <kind> element i"
    (e.g. ``larger``: j covers more area than i; ``above``: j sits above i).
    ``reading_order`` asks i to precede j.  Target kinds constrain element i
    against ``target`` and ignore j.
    """

    kind: str
    i: int
    j: int = -1
    target: float = 0.0

    def __post_init__(self):
        if self.kind not in PAIR_KINDS + TARGET_KINDS:
            raise DataError("PARSE_ERROR", f"unknown relation kind {self.kind!r}")
        if self.kind in PAIR_KINDS and self.i == self.j:
            raise DataError("INVALID_CONDITION", "relation endpoints must differ")


@dataclass(frozen=True)
class PriorSpec:
    """A weak constraint attached to a sampling run.

    Refinement kinds carry the clamped noisy geometry (``boxes``, one row per
    element) and window ``margin``; the loss-guided kind carries relation
    constraints applied through gradient-based logit adjustment ``repeats``
    times per diffusion step.
    """

    kind: str
    weight: float = 3.0
    margin: float = 0.2
    boxes: np.ndarray | None = field(default=None, repr=False)
    relations: tuple = ()
    repeats: int = 3

    def __post_init__(self):
        if self.weight < 0:
            raise DataError("INVALID_CONDITION", "prior weight must be nonnegative")
        if self.kind != LOSS_GUIDED and not (0.0 < self.margin < 1.0):
            raise DataError("INVALID_CONDITION", "margin must lie in (0, 1)")


def _edges(box):
    cx, cy, w, h = box
    return cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2


def relation_loss(boxes: np.ndarray, constraints, tolerance: float = REL_TOLERANCE):
    """Total penalty over ``constraints`` plus its gradient w.r.t. ``boxes``.

    ``boxes`` is (E, 4) in (cx, cy, w, h) form.  Returns (loss, grad) where
    grad has the same shape as boxes.
    """
    boxes = np.asarray(boxes, dtype=float)
    grad = np.zeros_like(boxes)
    total = 0.0
    for c in constraints:
        xi, yi, wi, hi = boxes[c.i]
        if c.kind == AREA:
            r = wi * hi - c.target
            total += abs(r)
            s = np.sign(r)
            grad[c.i, 2] += s * hi
            grad[c.i, 3] += s * wi
            continue
        if c.kind == ASPECT:
            r = hi / wi - c.target
            total += abs(r)
            s = np.sign(r)
            grad[c.i, 2] += -s * hi / wi**2
            grad[c.i, 3] += s / wi
            continue
        xj, yj, wj, hj = boxes[c.j]
        if c.kind == LARGER:
            v = (1 + tolerance) * wi * hi - wj * hj
            if v > 0:
                total += v
                grad[c.i, 2] += (1 + tolerance) * hi
                grad[c.i, 3] += (1 + tolerance) * wi
                grad[c.j, 2] += -hj
                grad[c.j, 3] += -wj
        elif c.kind == SMALLER:
            v = (1 + tolerance) * wj * hj - wi * hi
            if v > 0:
                total += v
                grad[c.j, 2] += (1 + tolerance) * hj
                grad[c.j, 3] += (1 + tolerance) * wj
                grad[c.i, 2] += -hi
                grad[c.i, 3] += -wi
        elif c.kind == EQUAL_SIZE:
            for a, b in ((c.i, c.j), (c.j, c.i)):
                wa, ha = boxes[a, 2], boxes[a, 3]
                wb, hb = boxes[b, 2], boxes[b, 3]
                v = wa * ha - (1 + tolerance) * wb * hb
                if v > 0:
                    total += v
                    grad[a, 2] += ha
                    grad[a, 3] += wa
                    grad[b, 2] += -(1 + tolerance) * hb
                    grad[b, 3] += -(1 + tolerance) * wb
        elif c.kind == ABOVE:
            v = (yj + hj / 2) - (yi - hi / 2)
            if v > 0:
                total += v
                grad[c.j, 1] += 1.0
                grad[c.j, 3] += 0.5
                grad[c.i, 1] += -1.0
                grad[c.i, 3] += 0.5
        elif c.kind == BELOW:
            v = (yi + hi / 2) - (yj - hj / 2)
            if v > 0:
                total += v
                grad[c.i, 1] += 1.0
                grad[c.i, 3] += 0.5
                grad[c.j, 1] += -1.0
                grad[c.j, 3] += 0.5
        elif c.kind == LEFT:
            v = (xj + wj / 2) - (xi - wi / 2)
            if v > 0:
                total += v
                grad[c.j, 0] += 1.0
                grad[c.j, 2] += 0.5
                grad[c.i, 0] += -1.0
                grad[c.i, 2] += 0.5
        elif c.kind == RIGHT:
            v = (xi + wi / 2) - (xj - wj / 2)
            if v > 0:
                total += v
                grad[c.i, 0] += 1.0
                grad[c.i, 2] += 0.5
                grad[c.j, 0] += -1.0
                grad[c.j, 2] += 0.5
        elif c.kind == READING_ORDER:
            di = np.hypot(xi - wi / 2, yi - hi / 2)
            dj = np.hypot(xj - wj / 2, yj - hj / 2)
            v = di - dj
            if v > 0:
                total += v
                if di > 0:
                    grad[c.i, 0] += (xi - wi / 2) / di
                    grad[c.i, 2] += -(xi - wi / 2) / (2 * di)
                    grad[c.i, 1] += (yi - hi / 2) / di
                    grad[c.i, 3] += -(yi - hi / 2) / (2 * di)
                if dj > 0:
                    grad[c.j, 0] += -(xj - wj / 2) / dj
                    grad[c.j, 2] += (xj - wj / 2) / (2 * dj)
                    grad[c.j, 1] += -(yj - hj / 2) / dj
                    grad[c.j, 3] += (yj - hj / 2) / (2 * dj)
    return total, grad


def satisfied(boxes: np.ndarray, constraint: RelationConstraint,
              tolerance: float = REL_TOLERANCE, eps: float = 1e-9) -> bool:
    loss, _ = relation_loss(boxes, [constraint], tolerance)
    return loss <= eps


def derive_relations(boxes: np.ndarray, pairs, tolerance: float = REL_TOLERANCE):
    """Relations that a ground-truth layout satisfies, for the given pairs.

    Emits one size relation per pair and, when the boxes are separated on an
    axis, one location relation.  Used to build relationship-task conditions.
    """
    out = []
    for i, j in pairs:
        ai = boxes[i, 2] * boxes[i, 3]
        aj = boxes[j, 2] * boxes[j, 3]
        if aj > (1 + tolerance) * ai:
            out.append(RelationConstraint(LARGER, i=i, j=j))
        elif ai > (1 + tolerance) * aj:
            out.append(RelationConstraint(SMALLER, i=i, j=j))
        else:
            out.append(RelationConstraint(EQUAL_SIZE, i=i, j=j))
        li, ri, ti, bi = _edges(boxes[i])
        lj, rj, tj, bj = _edges(boxes[j])
        if bj <= ti:
            out.append(RelationConstraint(ABOVE, i=i, j=j))
        elif tj >= bi:
            out.append(RelationConstraint(BELOW, i=i, j=j))
        elif rj <= li:
            out.append(RelationConstraint(LEFT, i=i, j=j))
        elif lj >= ri:
            out.append(RelationConstraint(RIGHT, i=i, j=j))
    return out


def refine_prior(boxes: np.ndarray, kind: str, margin: float, vocab: Vocabulary,
                 max_elements: int) -> np.ndarray:
    """Prior table pinning geometry near a noisy observation.

    Returns a (5 * max_elements, n_tokens) table.  Only the geometric ids of
    the observed elements' x/y/w/h positions are weighted; category and PAD
    tail positions, and the PAD/MASK columns, stay neutral (zero).  The
    ``default`` kind marks centroids within ``margin`` of the observed value,
    ``gaussian`` weights them by squared distance, and ``negation`` forbids
    centroids outside the window.
    """
    if not (0.0 < margin < 1.0):
        raise DataError("INVALID_CONDITION", "margin must lie in (0, 1)")
    boxes = np.clip(np.asarray(boxes, dtype=float), 0.0, 1.0)
    table = np.zeros((5 * max_elements, vocab.n_tokens))
    for e in range(boxes.shape[0]):
        for a, mod in enumerate(GEOMETRIC):
            lo, hi = vocab.range_for(mod)
            cents = vocab.centroids[mod]
            obs = boxes[e, a]
            inside = np.abs(cents - obs) < margin
            if not inside.any():
                warnings.warn(
                    f"no {mod} centroid within {margin} of {obs:.3f}; widening to nearest",
                    PriorWindowWarning, stacklevel=2)
                inside[np.argmin(np.abs(cents - obs))] = True
            row = table[5 * e + 1 + a]
            if kind == REFINE_DEFAULT:
                row[lo:hi][inside] = 1.0
            elif kind == REFINE_GAUSSIAN:
                row[lo:hi][inside] = (cents[inside] - obs) ** 2
            elif kind == REFINE_NEGATION:
                row[lo:hi][~inside] = -np.inf
            else:
                raise DataError("PARSE_ERROR", f"unknown prior kind {kind!r}")
    return table


def expected_box(probs: np.ndarray, vocab: Vocabulary):
    """Differentiable continuous box from one element's four geometry rows.

    ``probs`` is (4, n_tokens) ordered (x, y, w, h); mass outside the
    geometric range (PAD/MASK) is renormalized away.  Returns the expected
    (cx, cy, w, h) under centroid locations.
    """
    box = np.empty(4)
    for a, mod in enumerate(GEOMETRIC):
        lo, hi = vocab.range_for(mod)
        p = probs[a, lo:hi]
        s = p.sum()
        if s <= 1e-12:
            raise NumericError("NO_GEOMETRIC_MASS",
                               f"no probability mass on {mod} tokens")
        box[a] = float(p @ vocab.centroids[mod]) / s
    return box


def expected_boxes_batch(probs: np.ndarray, vocab: Vocabulary, n_elements: int):
    """Vectorized ``expected_box`` over (..., 5M, n_tokens) tables.

    Returns (boxes, caches) where boxes is (..., E, 4) and caches hold what
    the gradient pass needs.
    """
    lead = probs.shape[:-2]
    boxes = np.empty(lead + (n_elements, 4))
    caches = []
    for a, mod in enumerate(GEOMETRIC):
        lo, hi = vocab.range_for(mod)
        pos = 5 * np.arange(n_elements) + 1 + a
        p = probs[..., pos, lo:hi]
        s = p.sum(axis=-1)
        if np.any(s <= 1e-12):
            raise NumericError("NO_GEOMETRIC_MASS",
                               f"no probability mass on {mod} tokens")
        val = (p @ vocab.centroids[mod]) / s
        boxes[..., :, a] = val
        caches.append((pos, lo, hi, s, val))
    return boxes, caches


def expected_boxes_grad(dboxes: np.ndarray, caches, vocab: Vocabulary,
                        out_shape) -> np.ndarray:
    """Backpropagate d(loss)/d(boxes) to d(loss)/d(probs table)."""
    grad = np.zeros(out_shape)
    for a, mod in enumerate(GEOMETRIC):
        pos, lo, hi, s, val = caches[a]
        # d val / d p_j = (loc_j - val) / s  for geometric j, 0 elsewhere
        loc = vocab.centroids[mod]
        g = dboxes[..., :, a][..., None] * (loc - val[..., None]) / s[..., None]
        grad[..., pos, lo:hi] += g
    return grad
