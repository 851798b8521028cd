import itertools

import numpy as np
import pytest

from layoutgen.constraints import ABOVE, LARGER, RelationConstraint
from layoutgen.core import Element, Layout
from layoutgen.errors import DataError
from layoutgen.kernels import pairwise_iou
from layoutgen.metrics import (alignment, density_coverage, docsim,
                               fid_from_features, max_iou_collection,
                               max_iou_pair, overlap, violation_rate)

from conftest import random_layout


def iou_scalar(a, b):
    return float(pairwise_iou(np.array([a]), np.array([b]))[0, 0])


def brute_force_max_iou(a: Layout, b: Layout) -> float:
    """Oracle: exhaustive within-category permutations."""
    cats_a, cats_b = a.categories(), b.categories()
    boxes_a, boxes_b = a.boxes(), b.boxes()
    total_best = 0.0
    for cat in np.unique(cats_a):
        ia = np.flatnonzero(cats_a == cat)
        ib = np.flatnonzero(cats_b == cat)
        best = -1.0
        for perm in itertools.permutations(ib):
            s = sum(iou_scalar(boxes_a[i], boxes_b[j]) for i, j in zip(ia, perm))
            best = max(best, s)
        total_best += best
    return total_best / len(a)


def grid_layout(offsets=(0.0, 0.0)):
    dx, dy = offsets
    elems = [Element(1, (0.25 + dx * i, 0.25 + dy * i, 0.3, 0.3))
             for i in range(2)]
    return Layout(tuple(elems))


class TestMaxIoU:
    def test_identical_layouts(self, rng):
        lay = random_layout(rng, n_elements=5)
        assert max_iou_pair(lay, lay) == pytest.approx(1.0)

    def test_disjoint_layouts(self):
        a = Layout((Element(1, (0.1, 0.1, 0.1, 0.1)), Element(2, (0.9, 0.9, 0.1, 0.1))))
        b = Layout((Element(1, (0.5, 0.5, 0.1, 0.1)), Element(2, (0.3, 0.3, 0.1, 0.1))))
        assert max_iou_pair(a, b) == 0.0

    def test_swapped_pairing_beats_identity(self):
        # identity pairing is poor, the swap is much better; the matcher
        # must find the swap (verified against the brute-force oracle)
        a = Layout((Element(1, (0.2, 0.2, 0.2, 0.2)), Element(1, (0.8, 0.8, 0.2, 0.2))))
        b = Layout((Element(1, (0.75, 0.75, 0.2, 0.2)), Element(1, (0.25, 0.25, 0.2, 0.2))))
        identity = (iou_scalar(a.boxes()[0], b.boxes()[0])
                    + iou_scalar(a.boxes()[1], b.boxes()[1])) / 2
        swapped = (iou_scalar(a.boxes()[0], b.boxes()[1])
                   + iou_scalar(a.boxes()[1], b.boxes()[0])) / 2
        assert swapped > identity
        assert max_iou_pair(a, b) == pytest.approx(brute_force_max_iou(a, b))
        assert max_iou_pair(a, b) == pytest.approx(swapped)

    def test_category_mismatch_rejected(self):
        a = Layout((Element(1, (0.5, 0.5, 0.2, 0.2)),))
        b = Layout((Element(2, (0.5, 0.5, 0.2, 0.2)),))
        with pytest.raises(DataError) as e:
            max_iou_pair(a, b)
        assert e.value.code == "CATEGORY_MISMATCH"

    def test_matches_brute_force_on_random_layouts(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            e = int(rng.integers(1, 7))
            cats = rng.integers(1, 3, size=e)
            a = Layout(tuple(Element(int(c), tuple(rng.uniform(0.2, 0.8, 2)) +
                                     tuple(rng.uniform(0.05, 0.4, 2))) for c in cats))
            b = Layout(tuple(Element(int(c), tuple(rng.uniform(0.2, 0.8, 2)) +
                                     tuple(rng.uniform(0.05, 0.4, 2))) for c in cats))
            assert max_iou_pair(a, b) == pytest.approx(brute_force_max_iou(a, b),
                                                       abs=1e-12)

    def test_order_invariance(self, rng):
        lay = random_layout(rng, n_elements=6)
        other = random_layout(rng, n_elements=0)
        perm = Layout(tuple(lay.elements[i] for i in rng.permutation(6)))
        ref = random_layout(rng, n_elements=6)
        ref = Layout(tuple(Element(lay.elements[i].category, ref.elements[i].bbox)
                           for i in range(6)))
        assert max_iou_pair(lay, ref) == pytest.approx(max_iou_pair(perm, ref))
        assert alignment(lay) == pytest.approx(alignment(perm))
        assert overlap(lay) == pytest.approx(overlap(perm))


class TestMaxIoUCollection:
    def test_identical_collections(self, rng):
        col = [random_layout(rng, n_elements=3) for _ in range(4)]
        assert max_iou_collection(col, col) == pytest.approx(1.0)

    def test_no_matching_multisets(self):
        a = [Layout((Element(1, (0.5, 0.5, 0.2, 0.2)),))]
        b = [Layout((Element(2, (0.5, 0.5, 0.2, 0.2)),))]
        assert max_iou_collection(a, b) == 0.0

    def test_three_versus_three_matches_exhaustive(self):
        rng = np.random.default_rng(1)
        gen = [random_layout(rng, categories=2, n_elements=2) for _ in range(3)]
        ref = [Layout(tuple(Element(g.elements[k].category,
                                    tuple(rng.uniform(0.3, 0.7, 2)) + (0.3, 0.3))
                            for k in range(2))) for g in gen]

        def pair_or_zero(a, b):
            if sorted(e.category for e in a.elements) != \
                    sorted(e.category for e in b.elements):
                return 0.0
            return max_iou_pair(a, b)

        best = max(sum(pair_or_zero(gen[i], ref[perm[i]]) for i in range(3)) / 3
                   for perm in itertools.permutations(range(3)))
        assert max_iou_collection(gen, ref) == pytest.approx(best, abs=1e-12)

    def test_unmatched_layouts_dilute_score(self, rng):
        col = [random_layout(rng, n_elements=2)]
        extra = col + [Layout((Element(5, (0.5, 0.5, 0.9, 0.9)),))]
        assert max_iou_collection(extra, col) == pytest.approx(0.5)


class TestAlignmentOverlap:
    def test_grid_layout_perfectly_aligned(self):
        elems = [Element(1, (0.25 + 0.5 * i, 0.25 + 0.5 * j, 0.3, 0.3))
                 for i in range(2) for j in range(2)]
        assert alignment(Layout(tuple(elems))) == 0.0

    def test_single_element_scores_zero(self):
        lay = Layout((Element(1, (0.3, 0.3, 0.2, 0.2)),))
        assert alignment(lay) == 0.0
        assert overlap(lay) == 0.0

    def test_small_offset_value(self):
        a = Element(1, (0.3, 0.3, 0.2, 0.2))
        b = Element(1, (0.31, 0.31, 0.2, 0.2))
        got = alignment(Layout((a, b)))
        assert got == pytest.approx(100 * -np.log(0.99), rel=1e-9)

    def test_nonoverlapping_layout(self):
        lay = Layout((Element(1, (0.2, 0.2, 0.2, 0.2)), Element(1, (0.7, 0.7, 0.2, 0.2))))
        assert overlap(lay) == 0.0

    def test_nested_element_counts_fully(self):
        big = Element(1, (0.5, 0.5, 0.8, 0.8))
        small = Element(2, (0.5, 0.5, 0.2, 0.2))
        got = overlap(Layout((big, small)))
        # small is fully covered (1.0); big covered by small's area fraction
        want = (1.0 + (0.2 * 0.2) / (0.8 * 0.8)) / 2
        assert got == pytest.approx(want, abs=1e-12)

    def test_half_overlap_pair(self):
        a = Element(1, (0.3, 0.5, 0.2, 0.2))
        b = Element(1, (0.4, 0.5, 0.2, 0.2))
        assert overlap(Layout((a, b))) == pytest.approx(0.5, abs=1e-12)


class TestDocSim:
    def test_identical_is_self_similarity_max(self, rng):
        lay = random_layout(rng, n_elements=4)
        self_sim = docsim(lay, lay)
        noisy = Layout(tuple(Element(e.category,
                                     (min(e.bbox[0] + 0.2, 1.0), e.bbox[1],
                                      e.bbox[2], e.bbox[3]))
                             for e in lay.elements))
        assert self_sim >= docsim(lay, noisy)

    def test_empty_versus_nonempty(self, rng):
        assert docsim(Layout(), random_layout(rng, n_elements=3)) == 0.0

    def test_two_element_hand_matching(self):
        a = Layout((Element(1, (0.2, 0.2, 0.2, 0.2)), Element(1, (0.8, 0.8, 0.4, 0.4))))
        b = Layout((Element(1, (0.8, 0.8, 0.4, 0.4)), Element(1, (0.2, 0.2, 0.2, 0.2))))
        # oracle: enumerate both pairings of the weight matrix
        def weight(e1, e2):
            area = min(e1.bbox[2] * e1.bbox[3], e2.bbox[2] * e2.bbox[3])
            d = np.hypot(e1.bbox[0] - e2.bbox[0], e1.bbox[1] - e2.bbox[1])
            return area * 2.0 ** (-2.0 * d)
        straight = weight(a.elements[0], b.elements[0]) + weight(a.elements[1], b.elements[1])
        crossed = weight(a.elements[0], b.elements[1]) + weight(a.elements[1], b.elements[0])
        assert docsim(a, b) == pytest.approx(max(straight, crossed) / 2, abs=1e-12)


class TestDensityCoverage:
    def test_identical_sets(self):
        feats = np.arange(10, dtype=float)[:, None]
        d, c = density_coverage(feats, feats, k=1)
        assert c == 1.0
        assert d >= 1.0

    def test_far_generated_set(self):
        ref = np.arange(6, dtype=float)[:, None]
        gen = ref + 1000.0
        d, c = density_coverage(gen, ref, k=2)
        assert (d, c) == (0.0, 0.0)

    def test_five_point_brute_force(self):
        ref = np.array([0.0, 1.0, 2.0, 5.0, 9.0])[:, None]
        gen = np.array([0.4, 1.1, 4.0, 8.0, 20.0])[:, None]
        k = 2
        # brute force: radius = distance to k-th nearest other ref point
        radius = []
        for i, r in enumerate(ref[:, 0]):
            d = np.sort(np.abs(np.delete(ref[:, 0], i) - r))
            radius.append(d[k - 1])
        radius = np.array(radius)
        inside = np.abs(gen[:, 0][:, None] - ref[:, 0][None, :]) <= radius[None, :]
        want_density = inside.sum() / (k * len(gen))
        want_coverage = inside.any(axis=0).mean()
        d, c = density_coverage(gen, ref, k=k)
        assert d == pytest.approx(want_density, abs=1e-12)
        assert c == pytest.approx(want_coverage, abs=1e-12)

    def test_too_few_points(self):
        with pytest.raises(DataError):
            density_coverage(np.zeros((3, 1)), np.zeros((3, 1)), k=5)


class TestViolationRate:
    def _above_pair(self, gap):
        return Layout((Element(1, (0.5, 0.7, 0.2, 0.2)),
                       Element(2, (0.5, 0.7 - gap, 0.2, 0.2))))

    def test_all_satisfied(self):
        lays = [self._above_pair(0.5) for _ in range(5)]
        cons = [[RelationConstraint(ABOVE, 0, 1)]] * 5
        assert violation_rate(lays, cons) == 0.0

    def test_all_violated(self):
        lays = [self._above_pair(0.0) for _ in range(5)]
        cons = [[RelationConstraint(ABOVE, 0, 1)]] * 5
        assert violation_rate(lays, cons) == 1.0

    def test_mixed_fraction(self):
        lays = [self._above_pair(0.5)] * 7 + [self._above_pair(0.0)] * 3
        cons = [[RelationConstraint(ABOVE, 0, 1)]] * 10
        assert violation_rate(lays, cons) == pytest.approx(0.3)

    def test_empty_constraints(self):
        assert violation_rate([], []) == 0.0


class TestFid:
    def test_self_distance_is_zero(self, rng):
        feats = rng.normal(size=(40, 6))
        assert abs(fid_from_features(feats, feats)) < 1e-6

    def test_two_unit_gaussians_closed_form(self):
        # points +-sqrt(0.5) around each mean: sample variance (ddof=1) is 1
        a = np.array([-np.sqrt(0.5), np.sqrt(0.5)])[:, None] + 0.0
        b = np.array([-np.sqrt(0.5), np.sqrt(0.5)])[:, None] + 3.0
        assert fid_from_features(a, b) == pytest.approx(9.0, abs=1e-6)

    def test_symmetry(self, rng):
        a = rng.normal(size=(30, 5))
        b = rng.normal(loc=0.3, size=(25, 5))
        assert fid_from_features(a, b) == pytest.approx(fid_from_features(b, a),
                                                        abs=1e-9)

    def test_singular_covariance_regularized(self):
        a = np.zeros((10, 3))
        b = np.ones((10, 3))
        got = fid_from_features(a, b)
        assert np.isfinite(got) and got == pytest.approx(3.0, rel=1e-3)
