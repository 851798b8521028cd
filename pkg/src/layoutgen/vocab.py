"""Scalar quantizers and the global token vocabulary.

The vocabulary concatenates disjoint per-modality id ranges:

    category: [0, C)        x: [C, C+B)         y: [C+B, C+2B)
    w: [C+2B, C+3B)         h: [C+3B, C+4B)     PAD = C+4B   MASK = C+4B+1

Geometric modalities are quantized to ``B`` centroids each, fitted per
modality with k-means (default), percentile grouping, or a fixed uniform
grid.  ``decode`` returns the centroid value of a geometric token id.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, QuantizerWarning

MODALITIES = ("category", "x", "y", "w", "h")
GEOMETRIC = ("x", "y", "w", "h")

KMEANS = "kmeans"
UNIFORM = "uniform"
PERCENTILE = "percentile"

_KMEANS_TOL = 1e-8
_KMEANS_MAX_ITER = 300


def _kmeans_pp_init(values: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty(k)
    centers[0] = values[rng.integers(len(values))]
    d2 = (values - centers[0]) ** 2
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[i:] = values[rng.integers(len(values), size=k - i)]
            break
        centers[i] = values[rng.choice(len(values), p=d2 / total)]
        d2 = np.minimum(d2, (values - centers[i]) ** 2)
    return np.sort(centers)


def _lloyd(values: np.ndarray, centers: np.ndarray) -> np.ndarray:
    centers = np.sort(centers.copy())
    for _ in range(_KMEANS_MAX_ITER):
        mids = (centers[:-1] + centers[1:]) / 2.0
        assign = np.searchsorted(mids, values, side="right")
        new = centers.copy()
        for j in range(len(centers)):
            sel = values[assign == j]
            if sel.size:
                new[j] = sel.mean()
        new = np.sort(new)
        if np.max(np.abs(new - centers)) < _KMEANS_TOL:
            centers = new
            break
        centers = new
    return centers


def _inertia(values: np.ndarray, centers: np.ndarray) -> float:
    centers = np.sort(centers)
    mids = (centers[:-1] + centers[1:]) / 2.0
    assign = np.searchsorted(mids, values, side="right")
    return float(((values - centers[assign]) ** 2).sum())


def _pad_to_size(centers: np.ndarray, k: int) -> np.ndarray:
    # Insert midpoints into the widest gaps (including the gaps to 0 and 1)
    # until we have k strictly increasing centroids.
    centers = np.unique(centers)
    while len(centers) < k:
        ext = np.concatenate(([0.0] if centers[0] > 0 else [], centers,
                              [1.0] if centers[-1] < 1 else []))
        gaps = np.diff(ext)
        g = int(np.argmax(gaps))
        centers = np.sort(np.append(centers, ext[g] + gaps[g] / 2.0))
    return centers


def fit_quantizer(values, bins: int, kind: str, rng: np.random.Generator | None = None,
                  modality: str = "x") -> np.ndarray:
    """Fit ``bins`` sorted centroids in [0, 1] for one geometric modality.

    ``uniform`` ignores the data: positions get {0, 1/B, ...}, sizes get
    {1/B, ..., 1.0}.  ``percentile`` averages B equal-count groups of the
    sorted data.  ``kmeans`` runs 1-D Lloyd iterations from a k-means++
    seeding (and from the uniform grid, keeping the better optimum).
    """
    if kind == UNIFORM:
        grid = np.arange(bins, dtype=float) / bins
        return grid if modality in ("x", "y") else grid + 1.0 / bins
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise DataError("EMPTY_DATA", "cannot fit a quantizer on empty data")
    if values.min() < 0.0 or values.max() > 1.0:
        raise DataError("OUT_OF_RANGE", "quantizer inputs must lie in [0, 1]")
    if bins < 2:
        raise DataError("EMPTY_DATA", "need at least 2 bins")

    distinct = np.unique(values)
    if len(distinct) < bins:
        warnings.warn(
            f"only {len(distinct)} distinct values for {bins} bins; padding with midpoints",
            QuantizerWarning, stacklevel=2)
        return _pad_to_size(distinct, bins)

    if kind == PERCENTILE:
        groups = np.array_split(np.sort(values), bins)
        centers = np.array([g.mean() for g in groups])
        return _pad_to_size(centers, bins)

    if kind != KMEANS:
        raise DataError("PARSE_ERROR", f"unknown quantizer kind {kind!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    best = None
    uniform_init = np.quantile(values, (np.arange(bins) + 0.5) / bins)
    for init in (_kmeans_pp_init(values, bins, rng), uniform_init):
        centers = _lloyd(values, init)
        if best is None or _inertia(values, centers) < _inertia(values, best):
            best = centers
    if len(np.unique(best)) < bins:
        best = _pad_to_size(best, bins)
    return best


@dataclass(frozen=True)
class Vocabulary:
    """Fitted token vocabulary: category ids, geometric centroids, specials."""

    categories: int
    bins: int
    centroids: dict = field(repr=False)  # modality -> sorted np.ndarray of length bins
    kind: str = KMEANS

    def __post_init__(self):
        for mod in GEOMETRIC:
            c = np.asarray(self.centroids[mod], dtype=float)
            if c.shape != (self.bins,):
                raise DataError("SHAPE_MISMATCH", f"{mod} centroids must have length {self.bins}")
            if not np.all(np.diff(c) > 0):
                raise DataError("OUT_OF_RANGE", f"{mod} centroids must be strictly increasing")
            if c.min() < 0.0 or c.max() > 1.0:
                raise DataError("OUT_OF_RANGE", f"{mod} centroids must lie in [0, 1]")
            self.centroids[mod] = c

    # ---- id layout -------------------------------------------------------
    @property
    def pad_id(self) -> int:
        return self.categories + 4 * self.bins

    @property
    def mask_id(self) -> int:
        return self.pad_id + 1

    @property
    def n_tokens(self) -> int:
        return self.pad_id + 2

    def range_for(self, modality: str) -> tuple[int, int]:
        if modality == "category":
            return (0, self.categories)
        i = GEOMETRIC.index(modality)
        start = self.categories + i * self.bins
        return (start, start + self.bins)

    def ordinary_count(self, modality: str) -> int:
        """Ordinary states of the modality's diffusion chain: tokens plus PAD."""
        lo, hi = self.range_for(modality)
        return hi - lo + 1

    @staticmethod
    def modality_of_position(p: int) -> str:
        return MODALITIES[p % 5]

    # ---- encode / decode -------------------------------------------------
    def encode_value(self, value: float, modality: str) -> int:
        """Global id of the centroid nearest to ``value`` (ties go down)."""
        c = self.centroids[modality]
        mids = (c[:-1] + c[1:]) / 2.0
        idx = int(np.searchsorted(mids, value, side="left"))
        return self.range_for(modality)[0] + idx

    def encode_values(self, values: np.ndarray, modality: str) -> np.ndarray:
        c = self.centroids[modality]
        mids = (c[:-1] + c[1:]) / 2.0
        return self.range_for(modality)[0] + np.searchsorted(mids, values, side="left")

    def decode_id(self, token: int) -> float:
        """Centroid value of a geometric token id."""
        for mod in GEOMETRIC:
            lo, hi = self.range_for(mod)
            if lo <= token < hi:
                return float(self.centroids[mod][token - lo])
        raise DataError("NOT_GEOMETRIC", f"token {token} is not a geometric id")

    def is_geometric(self, token: int) -> bool:
        return self.categories <= token < self.pad_id

    def to_local(self, tokens: np.ndarray, modality: str) -> np.ndarray:
        """Map global ids to the modality's local diffusion states.

        Locals 0..L-1 are the modality's ordinary tokens, L is PAD and L+1
        is MASK, where L = C or B.  Out-of-modality ids are rejected.
        """
        tokens = np.asarray(tokens)
        lo, hi = self.range_for(modality)
        out = np.empty_like(tokens)
        in_range = (tokens >= lo) & (tokens < hi)
        out[in_range] = tokens[in_range] - lo
        out[tokens == self.pad_id] = hi - lo
        out[tokens == self.mask_id] = hi - lo + 1
        bad = ~(in_range | (tokens == self.pad_id) | (tokens == self.mask_id))
        if np.any(bad):
            raise DataError("MODALITY_MISMATCH",
                            f"token {tokens[bad].ravel()[0]} outside the {modality} range")
        return out

    def to_global(self, locals_: np.ndarray, modality: str) -> np.ndarray:
        locals_ = np.asarray(locals_)
        lo, hi = self.range_for(modality)
        n = hi - lo
        out = np.where(locals_ < n, locals_ + lo,
                       np.where(locals_ == n, self.pad_id, self.mask_id))
        return out

    # ---- persistence -----------------------------------------------------
    def to_json(self) -> str:
        obj = {
            "C": self.categories,
            "B": self.bins,
            "centroids": {m: [float(v) for v in self.centroids[m]] for m in GEOMETRIC},
            "kind": self.kind,
        }
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        try:
            obj = json.loads(text)
            return cls(categories=int(obj["C"]), bins=int(obj["B"]),
                       centroids={m: np.asarray(obj["centroids"][m], dtype=float)
                                  for m in GEOMETRIC},
                       kind=obj["kind"])
        except (KeyError, ValueError, TypeError) as e:
            raise DataError("PARSE_ERROR", f"bad vocabulary JSON: {e}") from e


def fit_vocabulary(values_by_modality: dict, categories: int, bins: int,
                   kind: str = KMEANS, seed: int = 0) -> Vocabulary:
    """Fit all four geometric quantizers and assemble a Vocabulary."""
    rng = np.random.default_rng(seed)
    cents = {m: fit_quantizer(values_by_modality.get(m, ()), bins, kind, rng, modality=m)
             for m in GEOMETRIC}
    return Vocabulary(categories=categories, bins=bins, centroids=cents, kind=kind)
