import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from oracles import components_union_find
from styleseg.data import (BoundaryGrow, BoundaryShrink, CohortSpec, DataError, DilateIfMarker, Identity,
                           RemoveSmall, StyleTransform, apply_style, disc_offsets, generate_cohort, load_cohort,
                           save_cohort, split, split_counts)

masks = st.integers(1, 14).flatmap(lambda h: st.integers(1, 14).flatmap(lambda w: arrays(bool, (h, w))))


def disc_structure(r):
    return np.array([[dy * dy + dx * dx <= r * r for dx in range(-r, r + 1)] for dy in range(-r, r + 1)])


def test_disc_sizes():
    assert len(disc_offsets(1)) == 5
    assert len(disc_offsets(2)) == 13
    assert disc_offsets(0) == [(0, 0)]


class TestStyles:
    @given(masks, st.integers(1, 3))
    def test_grow_matches_scipy(self, m, r):
        expected = ndimage.binary_dilation(m, disc_structure(r))
        np.testing.assert_array_equal(BoundaryGrow(r).apply(m), expected)

    @given(masks, st.integers(1, 3))
    def test_shrink_matches_scipy(self, m, r):
        expected = ndimage.binary_erosion(m, disc_structure(r), border_value=0)
        np.testing.assert_array_equal(BoundaryShrink(r).apply(m), expected)

    @given(masks)
    def test_grow_contains_shrink_contained(self, m):
        grown, shrunk = BoundaryGrow(1).apply(m), BoundaryShrink(1).apply(m)
        assert not (m & ~grown).any()
        assert not (shrunk & ~m).any()

    @given(masks, st.integers(1, 12))
    def test_remove_small_keeps_exactly_big_components(self, m, k):
        out = RemoveSmall(k).apply(m)
        kept = [c for c in components_union_find(m) if len(c) > k]
        expected = np.zeros_like(m)
        for comp in kept:
            for p in comp:
                expected[p] = True
        np.testing.assert_array_equal(out, expected)

    @given(masks)
    def test_identity_and_idempotence(self, m):
        np.testing.assert_array_equal(Identity.apply(m), m)
        once = RemoveSmall(3).apply(m)
        np.testing.assert_array_equal(RemoveSmall(3).apply(once), once)

    def test_dilate_if_marker(self):
        m = np.zeros((5, 5), bool)
        m[2, 2] = True
        image = np.zeros((2, 5, 5))
        assert DilateIfMarker(1).apply(m, image).sum() == 1
        image[1, 0, 0] = 0.9
        assert DilateIfMarker(1).apply(m, image).sum() == 5
        with pytest.raises(DataError):
            DilateIfMarker(1).apply(m)

    def test_parse_round_trip(self):
        for s in [Identity, BoundaryGrow(2), RemoveSmall(10), DilateIfMarker(1)]:
            assert StyleTransform.parse(str(s)) == s

    def test_bad_styles(self):
        with pytest.raises(DataError):
            StyleTransform("blur", 1)
        with pytest.raises(DataError):
            BoundaryGrow(0)
        with pytest.raises(DataError):
            apply_style(np.full((2, 2), 0.5), None, Identity)


class TestGenerator:
    def test_deterministic(self):
        spec = CohortSpec("A", n_samples=4, seed=7, image_size=(32, 32))
        a, b = generate_cohort(spec), generate_cohort(spec)
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes()
            assert x.label.tobytes() == y.label.tobytes()

    def test_shared_seed_shares_images(self):
        a = generate_cohort(CohortSpec("A", n_samples=3, seed=1, image_size=(32, 32)))
        b = generate_cohort(CohortSpec("B", n_samples=3, seed=1, style="grow:1", image_size=(32, 32)))
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes()
            np.testing.assert_array_equal(y.label, BoundaryGrow(1).apply(x.label))

    def test_shapes_and_types(self):
        s = generate_cohort(CohortSpec("A", n_samples=2, image_size=(16, 24), lesion_radius=(1, 3)))[0]
        assert s.image.shape == (2, 16, 24) and s.image.dtype == np.float64
        assert s.label.dtype == bool and s.label.shape == (16, 24)
        assert np.array_equal(s.image.astype(np.float32).astype(np.float64), s.image)

    @settings(max_examples=15)
    @given(st.integers(0, 1000))
    def test_marker_flag_matches_channel(self, seed):
        spec = CohortSpec("G", n_samples=6, marker_prob=0.5, seed=seed, image_size=(32, 32), style="dilate_if_marker:1")
        for s in generate_cohort(spec):
            assert s.has_marker == (s.image[1].max() > 0.5)
            if not s.has_marker:
                np.testing.assert_array_equal(s.label, s.base_truth)

    @pytest.mark.parametrize("bad", [dict(image_size=(30, 32)), dict(lesion_count=(3, 2)),
                                     dict(lesion_radius=(0, 2)), dict(lesion_radius=(1, 20), image_size=(32, 32)),
                                     dict(marker_prob=1.5), dict(n_samples=0), dict(noise=-1)])
    def test_invalid_spec(self, bad):
        with pytest.raises(DataError):
            generate_cohort(CohortSpec("A", **bad))

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(DataError, match="flavour"):
            CohortSpec.from_dict({"source": "A", "flavour": 1})


class TestSplit:
    def test_counts(self):
        assert split_counts(60, (0.6, 0.2, 0.2)) == (36, 12, 12)
        with pytest.raises(DataError):
            split_counts(2, (0.6, 0.2, 0.2))
        with pytest.raises(DataError):
            split_counts(10, (0.5, 0.5, 0.5))

    def test_partition_and_shared_membership(self):
        a = generate_cohort(CohortSpec("A", n_samples=10, seed=3, image_size=(16, 16), lesion_radius=(1, 3)))
        b = generate_cohort(CohortSpec("B", n_samples=10, seed=3, image_size=(16, 16), lesion_radius=(1, 3)))
        parts = split(a + b, seed=5)
        for source in "AB":
            idx = [sorted(s.index for s in p if s.source == source) for p in parts]
            assert sorted(sum(idx, [])) == list(range(10))
        assert [[s.index for s in p if s.source == "A"] for p in parts] == \
               [[s.index for s in p if s.source == "B"] for p in parts]
        again = split(a + b, seed=5)
        assert [[s.index for s in p] for p in parts] == [[s.index for s in p] for p in again]


class TestContainer:
    def test_round_trip(self, tmp_path):
        spec = CohortSpec("M", n_samples=3, seed=2, marker_prob=0.5, style="dilate_if_marker:1",
                          image_size=(16, 16), lesion_radius=(1, 3))
        samples = generate_cohort(spec)
        save_cohort(spec, samples, tmp_path)
        spec2, back = load_cohort(tmp_path)
        assert spec2 == spec
        for x, y in zip(samples, back):
            assert x.image.tobytes() == y.image.tobytes()
            np.testing.assert_array_equal(x.label, y.label)
            np.testing.assert_array_equal(x.base_truth, y.base_truth)
            assert (x.has_marker, x.source, x.index) == (y.has_marker, y.source, y.index)

    def test_missing(self, tmp_path):
        with pytest.raises(DataError, match="manifest"):
            load_cohort(tmp_path)

    def test_truncated(self, tmp_path):
        spec = CohortSpec("A", n_samples=2, image_size=(16, 16), lesion_radius=(1, 3))
        save_cohort(spec, generate_cohort(spec), tmp_path)
        (tmp_path / "images.f32").write_bytes(b"\0" * 12)
        with pytest.raises(DataError):
            load_cohort(tmp_path)
