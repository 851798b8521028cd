import numpy as np
import pytest

from layoutgen.core import Element, Layout
from layoutgen.vocab import GEOMETRIC, UNIFORM, Vocabulary, fit_vocabulary


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def uniform_vocab():
    """C=5, B=32 uniform-grid vocabulary (no data needed)."""
    return fit_vocabulary({}, categories=5, bins=32, kind=UNIFORM)


@pytest.fixture
def tiny_vocab():
    """C=2, B=4 vocabulary with hand-set centroids for enumeration tests."""
    cents = {m: np.array([0.125, 0.375, 0.625, 0.875]) for m in GEOMETRIC}
    return Vocabulary(categories=2, bins=4, centroids=cents, kind="uniform")


def random_layout(rng, categories=5, max_elements=25, n_elements=None) -> Layout:
    e = int(rng.integers(0, max_elements + 1)) if n_elements is None else n_elements
    elems = []
    for _ in range(e):
        w = float(rng.uniform(0.01, 1.0))
        h = float(rng.uniform(0.01, 1.0))
        elems.append(Element(category=int(rng.integers(1, categories + 1)),
                             bbox=(float(rng.uniform(0, 1)), float(rng.uniform(0, 1)), w, h)))
    return Layout(tuple(elems))
