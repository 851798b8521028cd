"""Corpus ingestion, the synthetic desk-scale corpus, and refinement noise.

A corpus directory holds ``corpus.json`` (name, category names, limits,
discard count) plus ``{train,val,test}.jsonl`` with one layout object per
line: ``{"canvas": [W, H], "elements": [{"category": c, "bbox": [cx, cy, w,
h]}, ...]}`` in normalized center-size coordinates.  A small adapter also
accepts absolute left-top pixel boxes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .core import DEFAULT_MAX_ELEMENTS, Element, Layout, validate
from .errors import DataError
from .vocab import GEOMETRIC

SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# layout (de)serialization
# ---------------------------------------------------------------------------

def layout_to_obj(layout: Layout) -> dict:
    return {"canvas": [int(layout.canvas[0]), int(layout.canvas[1])],
            "elements": [{"category": int(e.category),
                          "bbox": [float(v) for v in e.bbox]}
                         for e in layout.elements]}


def layout_from_obj(obj: dict, schema: str = "center") -> Layout:
    try:
        canvas = tuple(obj.get("canvas", (1000, 1000)))
        elements = []
        for e in obj["elements"]:
            bbox = [float(v) for v in e["bbox"]]
            if schema == "ltwh_px":
                l, t, w, h = bbox
                bbox = [(l + w / 2) / canvas[0], (t + h / 2) / canvas[1],
                        w / canvas[0], h / canvas[1]]
            elif schema != "center":
                raise DataError("PARSE_ERROR", f"unknown schema {schema!r}")
            elements.append(Element(category=int(e["category"]), bbox=tuple(bbox)))
        return Layout(tuple(elements), canvas)
    except (KeyError, TypeError, ValueError) as err:
        raise DataError("PARSE_ERROR", f"bad layout object: {err}") from err


def layout_json(layout: Layout) -> str:
    return json.dumps(layout_to_obj(layout), sort_keys=True)


def save_layouts_jsonl(path, layouts) -> None:
    with open(path, "w") as fh:
        for lay in layouts:
            fh.write(layout_json(lay) + "\n")


def load_layouts_jsonl(path, schema: str = "center"):
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataError("PARSE_ERROR",
                                f"{path}:{line_no}: {err}") from err
            out.append(layout_from_obj(obj, schema))
    return out


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

@dataclass
class Corpus:
    name: str
    category_names: list
    max_elements: int = DEFAULT_MAX_ELEMENTS
    splits: dict = field(default_factory=dict)  # split -> list[Layout]
    discarded: int = 0

    @property
    def categories(self) -> int:
        return len(self.category_names)

    def all_layouts(self):
        for split in SPLITS:
            yield from self.splits.get(split, ())

    def geometry_values(self, split: str = "train") -> dict:
        """Per-modality coordinate lists for quantizer fitting."""
        vals = {m: [] for m in GEOMETRIC}
        for lay in self.splits.get(split, ()):
            for e in lay.elements:
                for a, m in enumerate(GEOMETRIC):
                    vals[m].append(e.bbox[a])
        return {m: np.asarray(v) for m, v in vals.items()}


def save_corpus(corpus: Corpus, path) -> None:
    os.makedirs(path, exist_ok=True)
    meta = {"name": corpus.name,
            "categories": list(corpus.category_names),
            "max_elements": corpus.max_elements,
            "discarded": corpus.discarded,
            "counts": {s: len(corpus.splits.get(s, ())) for s in SPLITS}}
    with open(os.path.join(path, "corpus.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    for split in SPLITS:
        save_layouts_jsonl(os.path.join(path, f"{split}.jsonl"),
                           corpus.splits.get(split, ()))


def load_corpus(path, schema: str = "center") -> Corpus:
    """Load a corpus directory, dropping layouts over the element limit."""
    meta_path = os.path.join(path, "corpus.json")
    if not os.path.exists(meta_path):
        raise DataError("PARSE_ERROR", f"no corpus.json under {path}")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
        names = list(meta["categories"])
        max_elements = int(meta.get("max_elements", DEFAULT_MAX_ELEMENTS))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
        raise DataError("PARSE_ERROR", f"bad corpus.json: {err}") from err
    corpus = Corpus(meta.get("name", "corpus"), names, max_elements)
    for split in SPLITS:
        fpath = os.path.join(path, f"{split}.jsonl")
        layouts = []
        if os.path.exists(fpath):
            for lay in load_layouts_jsonl(fpath, schema):
                if len(lay) > max_elements:
                    corpus.discarded += 1
                    continue
                for e in lay.elements:
                    if not (1 <= e.category <= len(names)):
                        raise DataError("UNKNOWN_CATEGORY",
                                        f"category {e.category} not in {split} corpus")
                validate(lay, len(names), max_elements)
                layouts.append(lay)
        corpus.splits[split] = layouts
    return corpus


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Grid-snapped document-like layouts with a known category law.

    Rows are stacked top to bottom; each row is cut into left-packed column
    spans, so at zero jitter every element shares its top edge with its row
    mates and first-in-row elements share their left edge across rows.
    Heights depend on the category, which makes sizes category-informative.
    """

    categories: int = 5
    grid: tuple = (8, 4)  # rows, cols
    jitter: float = 0.01
    count_weights: tuple = (0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)  # counts 1..8
    category_weights: tuple = ()
    size: int = 5000
    seed: int = 0
    split: tuple = (0.85, 0.05, 0.10)
    canvas: tuple = (1000, 1000)
    pad: float = 0.01

    def __post_init__(self):
        if self.jitter < 0:
            raise DataError("OUT_OF_RANGE", "jitter must be nonnegative")

    def category_law(self) -> np.ndarray:
        w = np.asarray(self.category_weights if self.category_weights
                       else [0.75 ** c for c in range(self.categories)], dtype=float)
        return w / w.sum()


def _gen_layout(spec: SyntheticSpec, rng: np.random.Generator) -> Layout:
    rows, cols = spec.grid
    counts = np.asarray(spec.count_weights, dtype=float)
    n_elem = int(rng.choice(len(counts), p=counts / counts.sum())) + 1
    n_elem = min(n_elem, rows * cols, DEFAULT_MAX_ELEMENTS)
    law = spec.category_law()
    cell_w, cell_h = 1.0 / cols, 1.0 / rows
    pad = spec.pad
    elements = []
    remaining = n_elem
    for row in range(rows):
        if remaining == 0:
            break
        lo = max(1, remaining - (rows - row - 1) * cols)
        hi = min(cols, remaining)
        k = int(rng.integers(lo, hi + 1))
        cuts = np.sort(rng.choice(np.arange(1, cols), size=k - 1, replace=False)) \
            if k > 1 else np.array([], dtype=int)
        bounds = np.concatenate([[0], cuts, [cols]])
        for s in range(k):
            cat = int(rng.choice(spec.categories, p=law)) + 1
            span = bounds[s + 1] - bounds[s]
            left = bounds[s] * cell_w + pad
            width = span * cell_w - 2 * pad
            top = row * cell_h + pad
            frac = 0.55 + (0.35 * (cat - 1) / max(spec.categories - 1, 1))
            height = (cell_h - 2 * pad) * frac
            box = np.array([left + width / 2, top + height / 2, width, height])
            if spec.jitter > 0:
                box = box + rng.normal(0.0, spec.jitter, size=4)
            cx = float(np.clip(box[0], 0.0, 1.0))
            cy = float(np.clip(box[1], 0.0, 1.0))
            w = float(np.clip(box[2], 0.004, 1.0))
            h = float(np.clip(box[3], 0.004, 1.0))
            elements.append(Element(cat, (cx, cy, w, h)))
        remaining -= k
    return Layout(tuple(elements), spec.canvas)


def gen_synthetic(spec: SyntheticSpec) -> Corpus:
    rng = np.random.default_rng(spec.seed)
    layouts = [_gen_layout(spec, rng) for _ in range(spec.size)]
    n_train = int(round(spec.split[0] * spec.size))
    n_val = int(round(spec.split[1] * spec.size))
    corpus = Corpus("synthetic", [f"cat{c}" for c in range(1, spec.categories + 1)])
    corpus.splits = {"train": layouts[:n_train],
                     "val": layouts[n_train:n_train + n_val],
                     "test": layouts[n_train + n_val:]}
    return corpus


# ---------------------------------------------------------------------------
# refinement noise
# ---------------------------------------------------------------------------

def perturb_for_refinement(layout: Layout, var: float = 0.01,
                           rng: np.random.Generator | None = None) -> Layout:
    """Add zero-mean Gaussian noise (std = sqrt(var)) to every coordinate.

    Categories stay untouched; results are clamped back to validity
    (centers into [0, 1], sizes into [1e-3, 1]).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    std = math.sqrt(var)
    elements = []
    for e in layout.elements:
        noisy = np.asarray(e.bbox) + rng.normal(0.0, std, size=4)
        elements.append(Element(e.category, (
            float(np.clip(noisy[0], 0.0, 1.0)),
            float(np.clip(noisy[1], 0.0, 1.0)),
            float(np.clip(noisy[2], 1e-3, 1.0)),
            float(np.clip(noisy[3], 1e-3, 1.0)))))
    return Layout(tuple(elements), layout.canvas)
