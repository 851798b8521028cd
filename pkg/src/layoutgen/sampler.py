"""Reverse-process sampling with strong masking and weak logit adjustment.

Generation starts from an all-MASK sequence (known fields pre-filled),
walks t = T, T-delta, ..., delta, and at every step: runs the denoiser,
forms the reverse distribution, adds any weak priors in log-probability
space, truncates to the nucleus, samples, and overwrites the known
positions.  Priors never touch strongly constrained positions' outcomes
because the overwrite happens after sampling.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .constraints import (LOSS_GUIDED, expected_boxes_batch, expected_boxes_grad,
                          refine_prior, relation_loss)
from .core import Layout, TaskCondition, unflatten
from .denoiser import Denoiser
from .diffusion import (DiffusionSchedule, fast_reverse_distribution,
                        probs_from_logits)
from .errors import DataError, NumericError
from .vocab import Vocabulary


def adjust_logits(log_probs: np.ndarray, prior: np.ndarray, weight: float) -> np.ndarray:
    """Renormalized exp(log p + weight * prior); -inf prior entries zero out.

    The sampler skips the call entirely at weight 0, which keeps zero-weight
    runs bit-identical to unguided ones.
    """
    adjusted = log_probs + weight * prior if weight != 0.0 else log_probs.copy()
    m = np.max(adjusted, axis=-1, keepdims=True)
    if np.any(~np.isfinite(m)):
        raise NumericError("ALL_MASSES_ZERO",
                           "every token at some position was suppressed")
    e = np.exp(adjusted - m)
    return e / e.sum(axis=-1, keepdims=True)


def _n_condition_elements(condition: TaskCondition, vocab: Vocabulary) -> int:
    cat_mask = condition.mask[0::5]
    cat_known = condition.known[0::5]
    return int(np.sum(cat_mask & (cat_known < vocab.categories)))


def _log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def _apply_guided(p, prior, vocab, n_elem):
    """One or more rounds of gradient-based logit adjustment (Eq.-style
    energy guidance through the expected continuous boxes)."""
    for _ in range(prior.repeats):
        boxes, caches = expected_boxes_batch(p, vocab, n_elem)
        gboxes = np.empty_like(boxes)
        for s in range(boxes.shape[0]):
            _, gboxes[s] = relation_loss(boxes[s], prior.relations)
        gtable = expected_boxes_grad(gboxes, caches, vocab, p.shape)
        p = adjust_logits(_log(p), -gtable, prior.weight)
    return p


def sample_tokens(model: Denoiser, vocab: Vocabulary, sched: DiffusionSchedule,
                  condition: TaskCondition, n: int, *, delta: int = 1,
                  top_p: float = 1.0, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` token sequences under the given condition.

    Returns an (n, 5M) array of clean token ids (no MASK remains when the
    model behaves; PAD-mixed elements are possible and surface on decode).
    """
    T = sched.timesteps
    if delta < 1 or T % delta != 0:
        raise DataError("INVALID_CONDITION", f"delta {delta} must divide T={T}")
    if not (0.0 < top_p <= 1.0):
        raise DataError("INVALID_CONDITION", "top_p must lie in (0, 1]")
    condition.check(vocab)
    length = condition.known.shape[0]

    static_priors = []
    guided_priors = []
    for prior in condition.priors:
        if prior.kind == LOSS_GUIDED:
            if not prior.relations:
                continue
            guided_priors.append(prior)
        else:
            table = refine_prior(prior.boxes, prior.kind, prior.margin, vocab,
                                 length // 5)
            static_priors.append((table, prior.weight))
    n_elem = _n_condition_elements(condition, vocab)
    if guided_priors and n_elem == 0:
        raise DataError("INVALID_CONDITION",
                        "loss-guided priors need conditioned elements")

    z = np.full((n, length), vocab.mask_id, dtype=np.int64)
    z[:, condition.mask] = condition.known[condition.mask]

    for t in range(T, 0, -delta):
        logits = model.forward(z, np.full(n, t))
        p = fast_reverse_distribution(probs_from_logits(logits), z, t, delta,
                                      sched, vocab)
        for table, weight in static_priors:
            if weight > 0:
                p = adjust_logits(_log(p), table, weight)
        for prior in guided_priors:
            if prior.weight > 0:
                p = _apply_guided(p, prior, vocab, n_elem)
        flat = p.reshape(n * length, -1)
        flat = kernels.nucleus_truncate(flat, top_p)
        draws = kernels.categorical_sample(flat, rng.random(n * length))
        z = draws.reshape(n, length)
        z[:, condition.mask] = condition.known[condition.mask]
        assert np.array_equal(
            z[:, condition.mask],
            np.broadcast_to(condition.known[condition.mask], (n, int(condition.mask.sum()))))
    return z


def sample(model: Denoiser, vocab: Vocabulary, sched: DiffusionSchedule,
           condition: TaskCondition, n: int, *, delta: int = 1,
           top_p: float = 1.0, rng: np.random.Generator,
           canvas: tuple = (1000, 1000)) -> list[Layout]:
    """Sample and decode layouts (see ``sample_tokens`` for the loop)."""
    toks = sample_tokens(model, vocab, sched, condition, n,
                         delta=delta, top_p=top_p, rng=rng)
    return [unflatten(row, vocab, canvas) for row in toks]


def guided_sample(model: Denoiser, vocab: Vocabulary, sched: DiffusionSchedule,
                  condition: TaskCondition, n: int, **kw) -> list[Layout]:
    """``sample`` for conditions carrying a loss-guided prior."""
    if not any(p.kind == LOSS_GUIDED for p in condition.priors):
        raise DataError("INVALID_CONDITION", "condition has no loss-guided prior")
    return sample(model, vocab, sched, condition, n, **kw)
