import hashlib
import json
import os

import numpy as np
import pytest

from layoutgen.core import Element, Layout
from layoutgen.data import (Corpus, SyntheticSpec, gen_synthetic, layout_from_obj,
                            layout_json, load_corpus, load_layouts_jsonl,
                            perturb_for_refinement, save_corpus,
                            save_layouts_jsonl)
from layoutgen.errors import DataError
from layoutgen.metrics import alignment, category_histogram

from conftest import random_layout


class TestLayoutJson:
    def test_roundtrip(self, rng):
        lay = random_layout(rng, n_elements=4)
        back = layout_from_obj(json.loads(layout_json(lay)))
        assert back == lay

    def test_pixel_schema_adapter(self):
        obj = {"canvas": [200, 100],
               "elements": [{"category": 2, "bbox": [50, 25, 100, 50]}]}
        lay = layout_from_obj(obj, schema="ltwh_px")
        np.testing.assert_allclose(lay.elements[0].bbox, (0.5, 0.5, 0.5, 0.5))

    def test_bad_object_rejected(self):
        with pytest.raises(DataError) as e:
            layout_from_obj({"elements": [{"category": 1}]})
        assert e.value.code == "PARSE_ERROR"


class TestCorpusIO:
    def _corpus(self, rng, n=12):
        lays = [random_layout(rng, n_elements=int(rng.integers(1, 6)))
                for _ in range(n)]
        return Corpus("demo", [f"c{i}" for i in range(1, 6)], 25,
                      {"train": lays[:8], "val": lays[8:10], "test": lays[10:]})

    def test_save_load_roundtrip(self, tmp_path, rng):
        corpus = self._corpus(rng)
        save_corpus(corpus, tmp_path / "demo")
        back = load_corpus(tmp_path / "demo")
        assert back.category_names == corpus.category_names
        assert {s: len(v) for s, v in back.splits.items()} == \
            {s: len(v) for s, v in corpus.splits.items()}
        assert back.splits["train"] == corpus.splits["train"]

    def test_discard_rule_counts(self, tmp_path, rng):
        corpus = self._corpus(rng, n=4)
        big = Layout(tuple(Element(1, (0.5, 0.5, 0.1, 0.1)) for _ in range(30)))
        corpus.splits["train"].append(big)
        save_corpus(corpus, tmp_path / "d")
        # saving does not filter; loading enforces the element cap
        back = load_corpus(tmp_path / "d")
        assert back.discarded == 1
        assert len(back.splits["train"]) == len(corpus.splits["train"]) - 1

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError) as e:
            load_corpus(tmp_path / "nope")
        assert e.value.code == "PARSE_ERROR"

    def test_unknown_category(self, tmp_path, rng):
        corpus = self._corpus(rng, n=3)
        save_corpus(corpus, tmp_path / "d")
        with open(tmp_path / "d" / "corpus.json") as fh:
            meta = json.load(fh)
        meta["categories"] = meta["categories"][:2]  # shrink C below used ids
        with open(tmp_path / "d" / "corpus.json", "w") as fh:
            json.dump(meta, fh)
        with pytest.raises(DataError) as e:
            load_corpus(tmp_path / "d")
        assert e.value.code == "UNKNOWN_CATEGORY"

    def test_jsonl_bytes_deterministic(self, tmp_path, rng):
        lays = [random_layout(rng, n_elements=3) for _ in range(5)]
        save_layouts_jsonl(tmp_path / "a.jsonl", lays)
        save_layouts_jsonl(tmp_path / "b.jsonl", lays)
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


class TestSynthetic:
    def test_zero_jitter_layouts_are_grid_aligned(self):
        spec = SyntheticSpec(size=60, jitter=0.0, seed=3)
        corpus = gen_synthetic(spec)
        for lay in corpus.all_layouts():
            assert alignment(lay) == pytest.approx(0.0, abs=1e-12)

    def test_seeded_generation_reproducible(self, tmp_path):
        a = gen_synthetic(SyntheticSpec(size=50, seed=9))
        b = gen_synthetic(SyntheticSpec(size=50, seed=9))
        save_corpus(a, tmp_path / "a")
        save_corpus(b, tmp_path / "b")
        for split in ("train", "val", "test"):
            assert (tmp_path / "a" / f"{split}.jsonl").read_bytes() == \
                (tmp_path / "b" / f"{split}.jsonl").read_bytes()

    def test_category_histogram_close_to_law(self):
        spec = SyntheticSpec(size=10_000, seed=1)
        corpus = gen_synthetic(spec)
        hist = category_histogram(list(corpus.all_layouts()), spec.categories)
        tv = 0.5 * np.abs(hist - spec.category_law()).sum()
        assert tv < 0.02

    def test_split_disjointness_by_hash(self):
        corpus = gen_synthetic(SyntheticSpec(size=300, seed=5))
        seen = {}
        for split, lays in corpus.splits.items():
            for lay in lays:
                digest = hashlib.sha256(layout_json(lay).encode()).hexdigest()
                assert digest not in seen, f"duplicate across {seen.get(digest)}/{split}"
                seen[digest] = split

    def test_element_counts_respect_weights(self):
        spec = SyntheticSpec(size=500, seed=2, count_weights=(0.0, 0.0, 1.0))
        corpus = gen_synthetic(spec)
        assert all(len(l) == 3 for l in corpus.all_layouts())

    def test_all_layouts_valid(self):
        from layoutgen.core import validate
        spec = SyntheticSpec(size=200, seed=7, jitter=0.05)
        for lay in gen_synthetic(spec).all_layouts():
            validate(lay, spec.categories, 25)


class TestPerturb:
    def test_zero_variance_is_identity(self, rng):
        lay = random_layout(rng, n_elements=5)
        assert perturb_for_refinement(lay, 0.0, rng) == lay

    def test_noise_std_is_point_one(self):
        lay = Layout((Element(1, (0.5, 0.5, 0.5, 0.5)),))
        rng = np.random.default_rng(0)
        draws = np.array([perturb_for_refinement(lay, 0.01, rng).elements[0].bbox
                          for _ in range(25_000)])
        stds = draws.std(axis=0)
        np.testing.assert_allclose(stds, 0.1, atol=0.002)

    def test_categories_untouched_and_clamped(self, rng):
        lay = Layout((Element(3, (0.01, 0.99, 0.01, 0.99)),))
        for _ in range(200):
            out = perturb_for_refinement(lay, 0.01, rng)
            e = out.elements[0]
            assert e.category == 3
            assert 0.0 <= e.bbox[0] <= 1.0 and 0.0 <= e.bbox[1] <= 1.0
            assert 0.0 < e.bbox[2] <= 1.0 and 0.0 < e.bbox[3] <= 1.0
