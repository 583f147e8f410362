import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskrefine.errors import ConfigError, MalformedFile, ValueOutOfRange, WrongRank
from maskrefine.maps import (
    DatasetEntry,
    DatasetIndex,
    Image,
    MaskSet,
    ProbabilityMap,
    binarize,
    read_image,
    read_mask_set,
    read_probability_map,
    write_image,
    write_mask_set,
    write_probability_map,
)


class TestProbabilityMapIO:
    def test_constant_map(self, tmp_path):
        path = tmp_path / "p.npy"
        np.save(path, np.full((3, 4, 4), 0.5, dtype=np.float32))
        pmap = read_probability_map(path)
        assert pmap.num_classes == 3
        assert pmap.height == 4 and pmap.width == 4
        assert np.all(pmap.values == 0.5)

    def test_wrist_sized_map(self, tmp_path):
        path = tmp_path / "p.npy"
        np.save(path, np.zeros((17, 384, 224), dtype=np.float32))
        pmap = read_probability_map(path)
        assert pmap.num_classes == 17
        assert (pmap.height, pmap.width) == (384, 224)

    def test_value_out_of_range(self, tmp_path):
        path = tmp_path / "p.npy"
        arr = np.zeros((2, 3, 3), dtype=np.float32)
        arr[1, 2, 2] = 1.2
        np.save(path, arr)
        with pytest.raises(ValueOutOfRange):
            read_probability_map(path)

    def test_epsilon_dust_is_snapped(self, tmp_path):
        path = tmp_path / "p.npy"
        arr = np.zeros((1, 2, 2), dtype=np.float32)
        arr[0, 0, 0] = np.float32(1.0) + np.float32(5e-7)
        np.save(path, arr)
        pmap = read_probability_map(path)
        assert pmap.values.max() == 1.0

    def test_wrong_rank(self, tmp_path):
        path = tmp_path / "p.npy"
        np.save(path, np.zeros((4, 4), dtype=np.float32))
        with pytest.raises(WrongRank):
            read_probability_map(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "p.npy"
        path.write_bytes(b"definitely not numpy")
        with pytest.raises(MalformedFile):
            read_probability_map(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "p.npy"
        np.save(path, np.zeros((2, 8, 8), dtype=np.float32))
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 100])
        with pytest.raises(MalformedFile):
            read_probability_map(path)

    def test_wrong_dtype(self, tmp_path):
        path = tmp_path / "p.npy"
        np.save(path, np.zeros((2, 3, 3), dtype=np.float64))
        with pytest.raises(MalformedFile):
            read_probability_map(path)

    def test_write_read_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        arr = rng.random((5, 9, 6)).astype(np.float32)
        pmap = ProbabilityMap(arr)
        path = tmp_path / "p.npy"
        write_probability_map(pmap, path)
        again = read_probability_map(path)
        assert np.array_equal(again.values, arr)


class TestMaskSetIO:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        mask = MaskSet((rng.random((5, 8, 8)) < 0.4).astype(np.uint8))
        path = tmp_path / "m.npy"
        write_mask_set(mask, path)
        again = read_mask_set(path)
        assert np.array_equal(again.bits, mask.bits)

    def test_rejects_value_two(self, tmp_path):
        path = tmp_path / "m.npy"
        arr = np.zeros((2, 4, 4), dtype=np.uint8)
        arr[0, 1, 1] = 2
        np.save(path, arr)
        with pytest.raises(ValueOutOfRange):
            read_mask_set(path)

    def test_teeth_sized_mask_accepted(self, tmp_path):
        path = tmp_path / "m.npy"
        np.save(path, np.ones((32, 16, 16), dtype=np.uint8))
        mask = read_mask_set(path)
        assert mask.num_classes == 32

    @settings(max_examples=30, deadline=None)
    @given(
        shape=st.tuples(
            st.integers(1, 4), st.integers(1, 12), st.integers(1, 12)
        ),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_round_trip_property(self, tmp_path_factory, shape, seed):
        rng = np.random.default_rng(seed)
        mask = MaskSet((rng.random(shape) < 0.5).astype(np.uint8))
        path = tmp_path_factory.mktemp("npy") / "m.npy"
        write_mask_set(mask, path)
        assert np.array_equal(read_mask_set(path).bits, mask.bits)


class TestBinarize:
    def test_boundary_inclusive(self):
        pmap = ProbabilityMap(np.full((1, 3, 3), 0.5, dtype=np.float32))
        assert np.all(binarize(pmap, 0.5).bits == 1)

    def test_just_below_threshold(self):
        pmap = ProbabilityMap(np.full((1, 3, 3), 0.4999, dtype=np.float32))
        assert np.all(binarize(pmap, 0.5).bits == 0)

    def test_mixed_plane(self):
        arr = np.array([[[0.2, 0.7], [0.7, 0.2]]], dtype=np.float32)
        bits = binarize(ProbabilityMap(arr), 0.5).bits
        assert np.array_equal(bits[0], np.array([[0, 1], [1, 0]], dtype=np.uint8))

    def test_threshold_bounds(self):
        pmap = ProbabilityMap(np.zeros((1, 2, 2), dtype=np.float32))
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                binarize(pmap, bad)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), t_lo=st.floats(0.05, 0.45), t_hi=st.floats(0.5, 0.95))
    def test_monotone_in_threshold(self, seed, t_lo, t_hi):
        rng = np.random.default_rng(seed)
        pmap = ProbabilityMap(rng.random((2, 6, 6)).astype(np.float32))
        low = binarize(pmap, t_lo).bits
        high = binarize(pmap, t_hi).bits
        assert np.all(high <= low)  # raising the threshold never adds a bit

    def test_purity(self):
        rng = np.random.default_rng(3)
        pmap = ProbabilityMap(rng.random((2, 5, 5)).astype(np.float32))
        assert np.array_equal(binarize(pmap, 0.3).bits, binarize(pmap, 0.3).bits)


class TestImagePng:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        image = Image(rng.integers(0, 256, size=(20, 30), dtype=np.uint8))
        path = tmp_path / "img.png"
        write_image(image, path)
        again = read_image(path)
        assert np.array_equal(again.pixels, image.pixels)

    def test_unreadable(self, tmp_path):
        path = tmp_path / "nope.png"
        path.write_bytes(b"not a png")
        with pytest.raises(MalformedFile):
            read_image(path)


class TestDatasetIndex:
    def test_json_round_trip(self, tmp_path):
        index = DatasetIndex(
            [
                DatasetEntry("a.png", "a.npy", "a_gt.npy", "train"),
                DatasetEntry("b.png", "b.npy", None, "unlabelled"),
            ]
        )
        path = tmp_path / "idx.json"
        index.save(path)
        again = DatasetIndex.load(path)
        assert again.to_json() == index.to_json()
        assert [e.image for e in again.split("train")] == ["a.png"]

    def test_invalid_split(self):
        with pytest.raises(ConfigError):
            DatasetEntry("a.png", "a.npy", None, "banana")

    def test_unlabelled_with_gt(self):
        with pytest.raises(ConfigError):
            DatasetEntry("a.png", "a.npy", "gt.npy", "unlabelled")

    def test_duplicate_paths(self):
        with pytest.raises(ConfigError):
            DatasetIndex(
                [
                    DatasetEntry("a.png", "a.npy", None, "unlabelled"),
                    DatasetEntry("a.png", "b.npy", None, "unlabelled"),
                ]
            )

    def test_schema_shape(self, tmp_path):
        index = DatasetIndex([DatasetEntry("x.png", "x.npy", None, "unlabelled")])
        path = tmp_path / "idx.json"
        index.save(path)
        doc = json.loads(path.read_text())
        assert doc == {"entries": [{"image": "x.png", "probs": "x.npy", "gt": None, "split": "unlabelled"}]}


class TestImmutability:
    def test_arrays_locked(self):
        mask = MaskSet(np.zeros((1, 2, 2), dtype=np.uint8))
        with pytest.raises(ValueError):
            mask.bits[0, 0, 0] = 1
