import logging

import numpy as np
import pytest

from invomed import data as D
from invomed.tensor import Rng

import oracles


def _write_gradient_ppm(path, h=6, w=6):
    arr = np.zeros((h, w, 3), dtype=np.uint8)
    arr[..., 0] = np.arange(w, dtype=np.uint8)[None, :] * 40
    arr[..., 1] = np.arange(h, dtype=np.uint8)[:, None] * 40
    arr[..., 2] = 7
    D.write_pnm(str(path), arr)
    return arr


class TestPnmCodec:
    def test_ppm_roundtrip_bit_exact(self, tmp_path):
        path = tmp_path / "img.ppm"
        arr = _write_gradient_ppm(path)
        assert np.array_equal(D.read_pnm(str(path)), arr)

    def test_pgm_roundtrip(self, tmp_path):
        path = tmp_path / "img.pgm"
        arr = (Rng(0).uniform([5, 7]) * 255).astype(np.uint8)
        D.write_pnm(str(path), arr)
        assert np.array_equal(D.read_pnm(str(path)), arr)

    def test_comment_tolerant_header(self, tmp_path):
        path = tmp_path / "c.pgm"
        payload = bytes(range(6))
        path.write_bytes(b"P5\n# a comment\n3 2\n255\n" + payload)
        arr = D.read_pnm(str(path))
        assert arr.shape == (2, 3)
        assert arr.tobytes() == payload

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n4 4\n255\n\x00\x01")
        with pytest.raises(ValueError):
            D.read_pnm(str(path))


def _make_cls_tree(tmp_path, classes=("benign", "malignant"), per_class=3):
    for ci, cls in enumerate(classes):
        d = tmp_path / cls
        d.mkdir()
        for i in range(per_class):
            val = 40 * ci + 10 * i
            D.write_pnm(str(d / f"im{i}.pgm"), np.full((4, 4), val, dtype=np.uint8))
    return tmp_path


class TestClassificationLoader:
    def test_enumeration_and_labels(self, tmp_path):
        samples = D.load_classification_dataset(str(_make_cls_tree(tmp_path)))
        assert len(samples) == 6
        assert sorted({s.target for s in samples}) == [0, 1]

    def test_lexicographic_class_order(self, tmp_path):
        _make_cls_tree(tmp_path)
        samples = D.load_classification_dataset(str(tmp_path))
        by_class = {s.source_id.split("/")[0]: s.target for s in samples}
        assert by_class == {"benign": 0, "malignant": 1}

    def test_corrupted_file_skipped_with_warning(self, tmp_path, caplog):
        _make_cls_tree(tmp_path, per_class=5)
        (tmp_path / "benign" / "bad.pgm").write_bytes(b"P5\n9 9\n255\n\x00")
        with caplog.at_level(logging.WARNING):
            samples = D.load_classification_dataset(str(tmp_path))
        assert len(samples) == 10
        assert any("skipping unreadable" in r.message for r in caplog.records)

    def test_empty_class_dir_is_error(self, tmp_path):
        _make_cls_tree(tmp_path)
        (tmp_path / "aaa_empty").mkdir()
        with pytest.raises(ValueError):
            D.load_classification_dataset(str(tmp_path))

    def test_inputs_in_unit_interval(self, tmp_path):
        samples = D.load_classification_dataset(str(_make_cls_tree(tmp_path)))
        for s in samples:
            assert s.input.min() >= 0.0 and s.input.max() <= 1.0


class TestSegmentationLoader:
    def _make_pairs(self, tmp_path, n=5, drop_mask_for=None):
        img_dir, mask_dir = tmp_path / "images", tmp_path / "masks"
        img_dir.mkdir()
        mask_dir.mkdir()
        for i in range(n):
            D.write_pnm(str(img_dir / f"case{i}.ppm"),
                        np.full((6, 6, 3), 30 * i, dtype=np.uint8))
            if i != drop_mask_for:
                mask = np.zeros((6, 6), dtype=np.uint8)
                mask[2:4, 2:4] = 255
                D.write_pnm(str(mask_dir / f"case{i}.pgm"), mask)
        return img_dir, mask_dir

    def test_matched_pairs(self, tmp_path):
        img_dir, mask_dir = self._make_pairs(tmp_path)
        samples = D.load_segmentation_dataset(str(img_dir), str(mask_dir))
        assert len(samples) == 5

    def test_mask_binarized(self, tmp_path):
        img_dir, mask_dir = self._make_pairs(tmp_path)
        samples = D.load_segmentation_dataset(str(img_dir), str(mask_dir))
        for s in samples:
            assert set(np.unique(s.target)) <= {0.0, 1.0}

    def test_missing_mask_skipped_with_warning(self, tmp_path, caplog):
        img_dir, mask_dir = self._make_pairs(tmp_path, drop_mask_for=2)
        with caplog.at_level(logging.WARNING):
            samples = D.load_segmentation_dataset(str(img_dir), str(mask_dir))
        assert len(samples) == 4
        assert any("no mask" in r.message for r in caplog.records)


class TestResize:
    def test_identity(self):
        img = Rng(0).uniform([5, 7, 3])
        assert np.array_equal(D.resize_bilinear(img, 5, 7), img)

    def test_constant_any_size(self):
        img = np.full((4, 4, 1), 0.77)
        out = D.resize_bilinear(img, 9, 3)
        assert np.max(np.abs(out - 0.77)) < 1e-12

    def test_ramp_against_closed_form(self):
        ramp = (np.arange(16, dtype=np.float64).reshape(4, 4)) / 15.0
        out = D.resize_bilinear(ramp[..., None], 2, 2)[..., 0]
        # corner-aligned 4->2 samples rows/cols {0, 3}: exactly the corners
        want = np.array([[ramp[0, 0], ramp[0, 3]], [ramp[3, 0], ramp[3, 3]]])
        assert np.max(np.abs(out - want)) < 1e-12

    def test_matches_pointwise_oracle(self):
        img = Rng(5).uniform([6, 5])
        out = D.resize_bilinear(img[..., None], 4, 7)[..., 0]
        for i in range(4):
            for j in range(7):
                y = i * (6 - 1) / (4 - 1)
                x = j * (5 - 1) / (7 - 1)
                assert abs(out[i, j] - oracles.bilinear_points(img, y, x)) < 1e-12

    def test_nearest_preserves_binary(self):
        mask = (Rng(6).uniform([8, 8]) > 0.5).astype(np.float64)
        out = D.resize_nearest(mask, 5, 5)
        assert set(np.unique(out)) <= {0.0, 1.0}


class TestSplit:
    def test_counts_100(self):
        samples = D.synth_blobs("cls", 100, 8, seed=1)
        split = D.split_dataset(samples, seed=3)
        assert (len(split.train), len(split.val), len(split.test)) == (72, 8, 20)

    def test_deterministic(self):
        samples = D.synth_blobs("cls", 40, 8, seed=2)
        a = D.split_dataset(samples, seed=9)
        b = D.split_dataset(samples, seed=9)
        assert [s.source_id for s in a.train] == [s.source_id for s in b.train]
        assert [s.source_id for s in a.test] == [s.source_id for s in b.test]

    def test_partition_disjoint_exhaustive(self):
        samples = D.synth_blobs("cls", 33, 8, seed=4)
        split = D.split_dataset(samples, seed=0)
        ids = [s.source_id for part in split for s in part]
        assert sorted(ids) == sorted(s.source_id for s in samples)
        assert len(set(ids)) == len(ids)

    def test_stratified_per_class_counts(self):
        samples = D.synth_blobs("cls", 100, 8, seed=5)  # 50 per class
        split = D.split_dataset(samples, seed=1, stratified=True)
        test_by_class = {c: sum(1 for s in split.test if s.target == c) for c in (0, 1)}
        assert test_by_class == {0: 10, 1: 10}

    def test_stratified_small_class_error(self):
        samples = D.synth_blobs("cls", 3, 8, seed=0)  # class 1 has one sample
        with pytest.raises(ValueError):
            D.split_dataset(samples, stratified=True)


class TestSynthBlobs:
    def test_class_rule_left_half(self):
        params = D.synth_blob_params(30, 24, seed=7)
        for s, p in zip(D.synth_blobs("cls", 30, 24, seed=7), params):
            assert (p["cx"] < 12.0) == (s.target == 0)

    def test_mask_equals_rasterizer_oracle(self):
        params = D.synth_blob_params(5, 16, seed=11)
        for s, p in zip(D.synth_blobs("seg", 5, 16, seed=11), params):
            mask = s.target[..., 0]
            # independent pixel loop over the ellipse inequality
            want = np.zeros((16, 16))
            for y in range(16):
                for x in range(16):
                    if ((x - p["cx"]) / p["rx"]) ** 2 + ((y - p["cy"]) / p["ry"]) ** 2 <= 1.0:
                        want[y, x] = 1.0
            assert np.array_equal(mask, want)
            assert int(mask.sum()) == int(want.sum())

    def test_same_seed_identical_bytes(self):
        a = D.dataset_digest(D.synth_blobs("seg", 12, 20, seed=3))
        b = D.dataset_digest(D.synth_blobs("seg", 12, 20, seed=3))
        assert a == b
        c = D.dataset_digest(D.synth_blobs("seg", 12, 20, seed=4))
        assert a != c

    def test_inputs_clipped(self):
        for s in D.synth_blobs("cls", 10, 16, seed=9):
            assert s.input.min() >= 0.0 and s.input.max() <= 1.0

    def test_balanced_classes(self):
        labels = [s.target for s in D.synth_blobs("cls", 40, 16, seed=13)]
        assert labels.count(0) == labels.count(1) == 20

    def test_bad_args(self):
        with pytest.raises(ValueError):
            D.synth_blobs("foo", 5)
        with pytest.raises(ValueError):
            D.synth_blobs("cls", 0)


class TestManifest:
    def test_manifest_loading(self, tmp_path):
        img = np.full((4, 4), 99, dtype=np.uint8)
        D.write_pnm(str(tmp_path / "a.pgm"), img)
        D.write_pnm(str(tmp_path / "b.pgm"), img)
        (tmp_path / "list.tsv").write_text("# comment\na.pgm\t0\nb.pgm\t1\n")
        samples = D.load_manifest(str(tmp_path / "list.tsv"))
        assert [s.target for s in samples] == [0, 1]
        assert samples[0].input.shape == (4, 4, 1)
