"""Canonical layout representation and token-sequence conversion.

A layout holds up to ``max_elements`` elements, each a category plus a
normalized (cx, cy, w, h) box.  Flattening produces a fixed-length sequence
of ``5 * max_elements`` token ids, five per element in (category, x, y, w, h)
order, padded with PAD; sampling tasks are expressed as a known/unknown mask
over that sequence plus optional weak priors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constraints import LOSS_GUIDED, PriorSpec, derive_relations
from .errors import DataError
from .vocab import GEOMETRIC, Vocabulary

DEFAULT_MAX_ELEMENTS = 25

# task names (shared with the condition-file JSON schema)
UNCONDITIONAL = "uncond"
CATEGORY_TO_GEOMETRY = "c"
CATEGORY_SIZE_TO_POSITION = "c+s"
COMPLETION = "completion"
REFINEMENT = "refine"
RELATIONSHIP = "relation"
TASKS = (UNCONDITIONAL, CATEGORY_TO_GEOMETRY, CATEGORY_SIZE_TO_POSITION,
         COMPLETION, REFINEMENT, RELATIONSHIP)

# tasks where the element count is fixed, so the PAD tail is part of the condition
_FIXED_COUNT_TASKS = (CATEGORY_TO_GEOMETRY, CATEGORY_SIZE_TO_POSITION,
                      REFINEMENT, RELATIONSHIP)


@dataclass(frozen=True)
class Element:
    category: int
    bbox: tuple  # (cx, cy, w, h), normalized


@dataclass(frozen=True)
class Layout:
    elements: tuple = ()
    canvas: tuple = (1000, 1000)  # pixels, rendering only

    def __len__(self) -> int:
        return len(self.elements)

    def boxes(self) -> np.ndarray:
        if not self.elements:
            return np.zeros((0, 4))
        return np.array([e.bbox for e in self.elements], dtype=float)

    def categories(self) -> np.ndarray:
        return np.array([e.category for e in self.elements], dtype=np.int64)


def validate(layout: Layout, categories: int, max_elements: int = DEFAULT_MAX_ELEMENTS) -> None:
    """Raise DataError unless the layout satisfies all invariants."""
    if len(layout) > max_elements:
        raise DataError("TOO_MANY_ELEMENTS",
                        f"{len(layout)} elements exceeds the maximum {max_elements}")
    if layout.canvas[0] <= 0 or layout.canvas[1] <= 0:
        raise DataError("OUT_OF_RANGE", "canvas dimensions must be positive")
    for e in layout.elements:
        if not (1 <= e.category <= categories):
            raise DataError("BAD_CATEGORY",
                            f"category {e.category} outside [1, {categories}]")
        cx, cy, w, h = e.bbox
        if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
            raise DataError("OUT_OF_RANGE", f"center ({cx}, {cy}) outside [0, 1]")
        if not (0.0 < w <= 1.0 and 0.0 < h <= 1.0):
            raise DataError("OUT_OF_RANGE", f"size ({w}, {h}) outside (0, 1]")


def canonical_order(layout: Layout) -> Layout:
    """Deterministic element order (category, cy, cx) for metrics/rendering."""
    key = lambda e: (e.category, e.bbox[1], e.bbox[0])
    return Layout(tuple(sorted(layout.elements, key=key)), layout.canvas)


def element_tokens(element: Element, vocab: Vocabulary) -> np.ndarray:
    """The (c, x, y, w, h) token quintuple of one element."""
    toks = np.empty(5, dtype=np.int64)
    toks[0] = element.category - 1
    for a, mod in enumerate(GEOMETRIC):
        toks[1 + a] = vocab.encode_value(element.bbox[a], mod)
    return toks


def flatten(layout: Layout, vocab: Vocabulary, max_elements: int = DEFAULT_MAX_ELEMENTS,
            *, shuffle: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """Quantize a layout into its 5M-token sequence (PAD-filled tail).

    With ``shuffle`` the element order is a uniform permutation drawn from
    ``rng``; training uses this to keep the order semantics-free.
    """
    validate(layout, vocab.categories, max_elements)
    seq = np.full(5 * max_elements, vocab.pad_id, dtype=np.int64)
    elements = list(layout.elements)
    if shuffle:
        if rng is None:
            raise DataError("INVALID_CONDITION", "shuffle requires an rng")
        order = rng.permutation(len(elements))
        elements = [elements[i] for i in order]
    for i, e in enumerate(elements):
        seq[5 * i:5 * i + 5] = element_tokens(e, vocab)
    return seq


def unflatten(seq: np.ndarray, vocab: Vocabulary, canvas: tuple = (1000, 1000)) -> Layout:
    """Decode a token sequence back to a layout via centroid lookup.

    All-PAD quintuples are dropped; a quintuple mixing PAD/MASK with content
    tokens is rejected, as is any token outside its position's modality.
    """
    seq = np.asarray(seq)
    if seq.ndim != 1 or seq.size % 5 != 0:
        raise DataError("SHAPE_MISMATCH", "sequence length must be a multiple of 5")
    elements = []
    for i in range(seq.size // 5):
        quint = seq[5 * i:5 * i + 5]
        special = (quint == vocab.pad_id) | (quint == vocab.mask_id)
        if special.all() and (quint == vocab.pad_id).all():
            continue
        if special.any():
            raise DataError("PARTIAL_ELEMENT",
                            f"element {i} mixes PAD/MASK with content tokens")
        cat = int(quint[0])
        if not (0 <= cat < vocab.categories):
            raise DataError("MODALITY_MISMATCH",
                            f"token {cat} is not a category id")
        bbox = []
        for a, mod in enumerate(GEOMETRIC):
            lo, hi = vocab.range_for(mod)
            tok = int(quint[1 + a])
            if not (lo <= tok < hi):
                raise DataError("MODALITY_MISMATCH",
                                f"token {tok} outside the {mod} range")
            bbox.append(vocab.decode_id(tok))
        elements.append(Element(category=cat + 1, bbox=tuple(bbox)))
    return Layout(tuple(elements), canvas)


@dataclass(frozen=True)
class TaskCondition:
    """Known tokens (MASK where unknown), the known-position mask, and priors."""

    task: str
    known: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)  # bool, True = known
    priors: tuple = ()

    def __post_init__(self):
        if self.known.shape != self.mask.shape:
            raise DataError("SHAPE_MISMATCH", "known and mask shapes differ")

    def check(self, vocab: Vocabulary) -> None:
        known_ok = np.all(self.known[self.mask] != vocab.mask_id)
        unknown_ok = np.all(self.known[~self.mask] == vocab.mask_id)
        if not (known_ok and unknown_ok):
            raise DataError("INVALID_CONDITION",
                            "mask and known tokens are inconsistent")


def unconditional(vocab: Vocabulary, max_elements: int = DEFAULT_MAX_ELEMENTS) -> TaskCondition:
    n = 5 * max_elements
    return TaskCondition(UNCONDITIONAL,
                         np.full(n, vocab.mask_id, dtype=np.int64),
                         np.zeros(n, dtype=bool))


def partial_condition(layout: Layout, vocab: Vocabulary,
                      max_elements: int = DEFAULT_MAX_ELEMENTS) -> TaskCondition:
    """Completion condition where every given element is fully known and the
    element count stays open (used when the partial layout is the input)."""
    validate(layout, vocab.categories, max_elements)
    n = 5 * max_elements
    known = np.full(n, vocab.mask_id, dtype=np.int64)
    mask = np.zeros(n, dtype=bool)
    for i, e in enumerate(layout.elements):
        known[5 * i:5 * i + 5] = element_tokens(e, vocab)
        mask[5 * i:5 * i + 5] = True
    return TaskCondition(COMPLETION, known, mask)


def make_condition(task: str, layout: Layout, vocab: Vocabulary,
                   max_elements: int = DEFAULT_MAX_ELEMENTS,
                   rng: np.random.Generator | None = None, *,
                   prior_weight: float = 3.0, margin: float = 0.2,
                   prior_kind: str = "default", relation_fraction: float = 0.1,
                   relations=None) -> TaskCondition:
    """Build the condition for one of the six generation tasks.

    Fixed-element-count tasks mark the PAD tail as known so the sampler
    cannot change the element count; completion and unconditional leave the
    tail free.  For refinement the given layout is the noisy observation:
    its categories become strong constraints and its geometry becomes a
    window prior.  For the relationship task, constraints are either passed
    explicitly or derived from a random ``relation_fraction`` of element
    pairs.
    """
    if task == UNCONDITIONAL:
        return unconditional(vocab, max_elements)
    if task not in TASKS:
        raise DataError("PARSE_ERROR", f"unknown task {task!r}")
    validate(layout, vocab.categories, max_elements)
    E = len(layout)
    if E == 0:
        raise DataError("EMPTY_LAYOUT", f"task {task!r} needs at least one element")
    if rng is None:
        rng = np.random.default_rng(0)

    n = 5 * max_elements
    known = np.full(n, vocab.mask_id, dtype=np.int64)
    mask = np.zeros(n, dtype=bool)
    if task in _FIXED_COUNT_TASKS:
        known[5 * E:] = vocab.pad_id
        mask[5 * E:] = True

    priors: tuple = ()
    if task == CATEGORY_TO_GEOMETRY:
        for i, e in enumerate(layout.elements):
            known[5 * i] = e.category - 1
            mask[5 * i] = True
    elif task == CATEGORY_SIZE_TO_POSITION:
        for i, e in enumerate(layout.elements):
            toks = element_tokens(e, vocab)
            for j in (0, 3, 4):  # category, w, h
                known[5 * i + j] = toks[j]
                mask[5 * i + j] = True
    elif task == COMPLETION:
        frac = rng.uniform(0.0, 0.2)
        k = int(round(frac * E))
        keep = rng.choice(E, size=k, replace=False)
        for slot, i in enumerate(np.sort(keep)):
            toks = element_tokens(layout.elements[i], vocab)
            known[5 * slot:5 * slot + 5] = toks
            mask[5 * slot:5 * slot + 5] = True
    elif task == REFINEMENT:
        for i, e in enumerate(layout.elements):
            known[5 * i] = e.category - 1
            mask[5 * i] = True
        priors = (PriorSpec(kind=prior_kind, weight=prior_weight, margin=margin,
                            boxes=np.clip(layout.boxes(), 0.0, 1.0)),)
    elif task == RELATIONSHIP:
        for i, e in enumerate(layout.elements):
            known[5 * i] = e.category - 1
            mask[5 * i] = True
        if relations is None:
            pairs = [(i, j) for i in range(E) for j in range(i + 1, E)]
            if pairs:
                n_pick = max(1, math.ceil(relation_fraction * len(pairs)))
                idx = rng.choice(len(pairs), size=min(n_pick, len(pairs)), replace=False)
                pairs = [pairs[int(t)] for t in np.sort(idx)]
            relations = derive_relations(layout.boxes(), pairs)
        priors = (PriorSpec(kind=LOSS_GUIDED, weight=prior_weight,
                            relations=tuple(relations)),)
    return TaskCondition(task, known, mask, priors)
