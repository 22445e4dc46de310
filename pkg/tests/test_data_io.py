import json
import struct

import numpy as np
import pytest

from jcapa.data_io import (DatasetSplit, class_intensity, generate_phantoms,
                           load_checkpoint, load_scan, load_split, read_array,
                           read_tensor, save_checkpoint, save_dataset,
                           split_dataset, write_array, write_tensor)
from jcapa.errors import (CompatibilityError, ConfigError, FormatError,
                          ValidationError)
from jcapa.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(31)


class TestTensorFormat:
    @pytest.mark.parametrize("shape", [(1,), (7,), (3, 4), (2, 3, 4, 5)])
    def test_float32_round_trip(self, tmp_path, rng, shape):
        arr = rng.standard_normal(shape).astype(np.float32)
        path = tmp_path / "t.jcpt"
        write_array(path, arr)
        back = read_array(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)
        assert back.tobytes() == arr.tobytes()

    def test_uint8_round_trip(self, tmp_path, rng):
        arr = rng.integers(0, 255, (9, 5)).astype(np.uint8)
        path = tmp_path / "l.jcpt"
        write_array(path, arr)
        back = read_array(path)
        assert back.dtype == np.uint8
        assert np.array_equal(back, arr)

    def test_scalar_stored_as_one_element(self, tmp_path):
        path = tmp_path / "s.jcpt"
        write_array(path, np.float32(3.5))
        back = read_array(path)
        assert back.shape == (1,)
        assert back[0] == np.float32(3.5)

    def test_exact_byte_layout(self, tmp_path):
        arr = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        path = tmp_path / "t.jcpt"
        write_array(path, arr)
        blob = path.read_bytes()
        expected = (b"JCPT" + bytes([1, 0, 2])
                    + struct.pack("<I", 2) + struct.pack("<I", 2)
                    + struct.pack("<4f", 1.0, 2.0, 3.0, 4.0))
        assert blob == expected

    def test_uint8_dtype_byte(self, tmp_path):
        path = tmp_path / "l.jcpt"
        write_array(path, np.zeros((3,), dtype=np.uint8))
        blob = path.read_bytes()
        assert blob[4] == 1  # version
        assert blob[5] == 1  # dtype code for uint8

    def test_bad_magic_offset_zero(self, tmp_path):
        path = tmp_path / "bad.jcpt"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FormatError, match=r"magic.*offset 0"):
            read_array(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "bad.jcpt"
        path.write_bytes(b"JCPT" + bytes([9, 0, 1]) + struct.pack("<I", 1)
                         + struct.pack("<f", 0.0))
        with pytest.raises(FormatError, match=r"version 9.*offset 4"):
            read_array(path)

    def test_truncated_payload_names_lengths(self, tmp_path):
        arr = np.arange(6, dtype=np.float32)
        path = tmp_path / "t.jcpt"
        write_array(path, arr)
        full = path.read_bytes()
        path.write_bytes(full[:-8])
        with pytest.raises(FormatError, match=r"needs 24 bytes, 16 left"):
            read_array(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "t.jcpt"
        write_array(path, np.zeros(2, dtype=np.float32))
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError, match="trailing"):
            read_array(path)

    def test_tensor_wrappers(self, tmp_path, rng):
        t = Tensor(rng.standard_normal((2, 3)).astype(np.float32))
        path = tmp_path / "t.jcpt"
        write_tensor(path, t)
        back = read_tensor(path)
        assert isinstance(back, Tensor)
        assert np.array_equal(back.data, t.data)

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(ValidationError, match="dtype"):
            write_array(tmp_path / "x.jcpt", np.zeros(3, dtype=np.int32))


class TestCheckpointFormat:
    def test_round_trip_bitwise(self, tmp_path, rng):
        params = {
            "enc.w0": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
            "enc.b0": np.zeros(4, dtype=np.float32),
            "gamma": np.array([0.25], dtype=np.float32),
        }
        path = tmp_path / "m.jckp"
        save_checkpoint(path, params)
        back = load_checkpoint(path)
        assert list(back) == list(params)
        for name in params:
            assert np.array_equal(back[name], params[name])
            assert back[name].tobytes() == params[name].tobytes()

    def test_expected_names_mismatch_lists_both_sides(self, tmp_path):
        path = tmp_path / "m.jckp"
        save_checkpoint(path, {"a": np.zeros(1, dtype=np.float32),
                               "b": np.zeros(1, dtype=np.float32)})
        with pytest.raises(CompatibilityError) as err:
            load_checkpoint(path, expected_names=["a", "c"])
        assert "missing ['c']" in str(err.value)
        assert "extra ['b']" in str(err.value)

    def test_accepts_tensor_values(self, tmp_path):
        path = tmp_path / "m.jckp"
        save_checkpoint(path, {"w": Tensor(np.ones((2, 2)))})
        back = load_checkpoint(path, expected_names=["w"])
        assert np.array_equal(back["w"], np.ones((2, 2), dtype=np.float32))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.jckp"
        path.write_bytes(b"XXXX" + bytes(10))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_truncated_entry(self, tmp_path):
        path = tmp_path / "m.jckp"
        save_checkpoint(path, {"w": np.ones((2, 2), dtype=np.float32)})
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)

    def test_empty_checkpoint_round_trips(self, tmp_path):
        path = tmp_path / "m.jckp"
        save_checkpoint(path, {})
        assert load_checkpoint(path) == {}


class TestPhantoms:
    def test_same_seed_bitwise_identical(self):
        a = generate_phantoms(7, n_scans=2, slices_per_scan=3, h=32, w=32, k=4)
        b = generate_phantoms(7, n_scans=2, slices_per_scan=3, h=32, w=32, k=4)
        for sa, sb in zip(a, b):
            assert sa.scan_id == sb.scan_id
            for la, lb in zip(sa.slices, sb.slices):
                assert np.array_equal(la.image, lb.image)
                assert np.array_equal(la.label, lb.label)

    def test_every_class_present_per_scan(self):
        scans = generate_phantoms(3, n_scans=5, slices_per_scan=4,
                                  h=64, w=64, k=9)
        for scan in scans:
            stack = np.stack([sl.label for sl in scan.slices])
            present = set(np.unique(stack))
            assert set(range(1, 9)) <= present

    def test_slice_shapes_and_ranges(self):
        scans = generate_phantoms(11, n_scans=2, slices_per_scan=3,
                                  h=48, w=40, k=5)
        for scan in scans:
            for sl in scan.slices:
                assert sl.image.shape == (1, 48, 40)
                assert sl.image.dtype == np.float32
                assert sl.label.shape == (48, 40)
                assert 0.0 <= sl.image.min() and sl.image.max() <= 1.0
                assert sl.label.max() < 5

    def test_class_mean_intensity_tracks_table(self):
        scans = generate_phantoms(5, n_scans=30, slices_per_scan=4,
                                  h=64, w=64, k=9)
        images = np.stack([sl.image[0] for s in scans for sl in s.slices])
        labels = np.stack([sl.label for s in scans for sl in s.slices])
        for c in range(9):
            mask = labels == c
            assert mask.any()
            mean = float(images[mask].mean())
            assert abs(mean - class_intensity(c)) < 0.03

    def test_min_size_guard(self):
        with pytest.raises(ConfigError, match="at least"):
            generate_phantoms(1, n_scans=1, slices_per_scan=1, h=8, w=8, k=3)

    def test_class_count_guard(self):
        with pytest.raises(ConfigError, match="classes"):
            generate_phantoms(1, n_scans=1, slices_per_scan=1, h=32, w=32, k=1)

    def test_organs_spatially_consistent_across_scans(self):
        # each class sticks to its ring sector, so per-class centroids from
        # different scans stay close
        scans = generate_phantoms(13, n_scans=6, slices_per_scan=2,
                                  h=64, w=64, k=5)
        for c in range(1, 5):
            centroids = []
            for scan in scans:
                stack = np.stack([sl.label for sl in scan.slices])
                coords = np.argwhere(stack == c)[:, 1:]
                centroids.append(coords.mean(axis=0))
            spread = np.ptp(np.array(centroids), axis=0)
            assert np.all(spread < 12.0)


class TestSplit:
    def test_thirty_scans_split_18_12(self):
        split = split_dataset(range(30), seed=4)
        assert len(split.train_ids) == 18
        assert len(split.test_ids) == 12
        assert not set(split.train_ids) & set(split.test_ids)
        assert set(split.train_ids) | set(split.test_ids) == set(range(30))

    def test_five_scans_split_3_2(self):
        split = split_dataset(range(5), seed=0)
        assert len(split.train_ids) == 3
        assert len(split.test_ids) == 2

    def test_deterministic_in_seed(self):
        a = split_dataset(range(12), seed=9)
        b = split_dataset(range(12), seed=9)
        assert a == b
        c = split_dataset(range(12), seed=10)
        assert c != a

    def test_accepts_scans(self):
        scans = generate_phantoms(1, n_scans=4, slices_per_scan=1,
                                  h=32, w=32, k=3)
        split = split_dataset(scans, seed=1)
        assert sorted(split.train_ids + split.test_ids) == [0, 1, 2, 3]

    def test_too_few_scans(self):
        with pytest.raises(ConfigError, match="at least 2"):
            split_dataset([1], seed=0)

    def test_duplicate_ids(self):
        with pytest.raises(ValidationError, match="duplicate"):
            split_dataset([1, 1, 2], seed=0)


class TestDatasetLayout:
    def test_save_then_load(self, tmp_path):
        scans = generate_phantoms(21, n_scans=3, slices_per_scan=2,
                                  h=32, w=32, k=4)
        split = split_dataset(scans, seed=21)
        save_dataset(tmp_path, scans, split)

        assert (tmp_path / "scans" / "scan_0" / "slice_0.img.jcpt").exists()
        assert (tmp_path / "scans" / "scan_2" / "slice_1.lbl.jcpt").exists()
        back_split = load_split(tmp_path)
        assert back_split == split

        for scan in scans:
            loaded = load_scan(tmp_path, scan.scan_id)
            assert len(loaded.slices) == 2
            for orig, got in zip(scan.slices, loaded.slices):
                assert np.array_equal(orig.image, got.image)
                assert np.array_equal(orig.label, got.label)
                assert got.label.dtype == np.uint8

    def test_split_json_shape(self, tmp_path):
        scans = generate_phantoms(2, n_scans=2, slices_per_scan=1,
                                  h=32, w=32, k=3)
        save_dataset(tmp_path, scans, DatasetSplit([0], [1]))
        doc = json.loads((tmp_path / "split.json").read_text())
        assert doc == {"train": [0], "test": [1]}

    def test_overlapping_split_rejected(self, tmp_path):
        tmp_path.joinpath("split.json").write_text(
            '{"train": [0, 1], "test": [1]}')
        with pytest.raises(ValidationError, match="overlap"):
            load_split(tmp_path)

    def test_malformed_split_rejected(self, tmp_path):
        tmp_path.joinpath("split.json").write_text("{nope")
        with pytest.raises(ValidationError, match="malformed"):
            load_split(tmp_path)

    def test_missing_scan_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_scan(tmp_path, 99)
