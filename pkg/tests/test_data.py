"""Dataset container validation and on-disk round-trips."""

import json

import numpy as np
import pytest

from sscl.data import (IGNORE_LABEL, ChannelMeta, ChannelStack, ClassMap,
                       DatasetManifest, LabeledSample, Modality,
                       ValidationError, load_sample, save_sample,
                       validate_manifest)


def _meta(c=3):
    return tuple(ChannelMeta(f"ch{i}", Modality.OPTICAL_LIKE, 1) for i in range(c))


def _stack(c=3, h=16, w=16, seed=0):
    rng = np.random.default_rng(seed)
    return ChannelStack(rng.random((c, h, w)).astype(np.float32), _meta(c))


class TestChannelStack:
    def test_accepts_valid(self):
        s = _stack()
        assert s.C == 3 and s.H == 16 and s.W == 16

    def test_coerces_to_float32(self):
        s = ChannelStack(np.zeros((3, 16, 16), dtype=np.float64), _meta())
        assert s.data.dtype == np.float32

    def test_rejects_too_few_channels(self):
        with pytest.raises(ValidationError):
            ChannelStack(np.zeros((1, 16, 16), dtype=np.float32), _meta(1))

    def test_rejects_small_raster(self):
        with pytest.raises(ValidationError):
            ChannelStack(np.zeros((2, 8, 16), dtype=np.float32), _meta(2))

    def test_rejects_nonfinite(self):
        a = np.zeros((2, 16, 16), dtype=np.float32)
        a[0, 0, 0] = np.inf
        with pytest.raises(ValidationError):
            ChannelStack(a, _meta(2))

    def test_rejects_meta_mismatch(self):
        with pytest.raises(ValidationError):
            ChannelStack(np.zeros((3, 16, 16), dtype=np.float32), _meta(2))


class TestLabeledSample:
    def test_ignore_sentinel_allowed(self):
        labels = np.zeros((16, 16), dtype=np.uint8)
        labels[0] = IGNORE_LABEL
        LabeledSample(_stack(), labels, "s0", num_classes=4)

    def test_rejects_out_of_range_label(self):
        labels = np.full((16, 16), 7, dtype=np.uint8)
        with pytest.raises(ValidationError):
            LabeledSample(_stack(), labels, "s0", num_classes=4)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValidationError):
            LabeledSample(_stack(), np.zeros((8, 16), dtype=np.uint8), "s0", num_classes=4)


class TestClassMap:
    def test_rejects_duplicates(self):
        with pytest.raises(ValidationError):
            ClassMap(("water", "water"))

    def test_rejects_single_class(self):
        with pytest.raises(ValidationError):
            ClassMap(("water",))


def _manifest(tmp_path, c=3, h=16, w=16, splits=None):
    return DatasetManifest(
        root=tmp_path,
        class_map=ClassMap(("a", "b", "c", "d")),
        channel_meta=_meta(c),
        H=h, W=w,
        splits=splits or {"train": ["s00000"], "test": ["s00001"]},
        seed=0,
    )


class TestRoundTrip:
    def test_sample_bytes_survive(self, tmp_path):
        man = _manifest(tmp_path)
        rng = np.random.default_rng(3)
        img = rng.random((3, 16, 16)).astype(np.float32)
        labels = rng.integers(0, 4, (16, 16)).astype(np.uint8)
        labels[0, 0] = IGNORE_LABEL
        sample = LabeledSample(ChannelStack(img, _meta()), labels, "s00000", 4)
        save_sample(sample, tmp_path / "samples" / "s00000")
        back = load_sample(tmp_path / "samples" / "s00000", man)
        assert back.stack.data.tobytes() == img.tobytes()
        assert np.array_equal(back.labels, labels)

    def test_manifest_round_trip(self, tmp_path):
        man = _manifest(tmp_path)
        man.save()
        back = DatasetManifest.load(tmp_path)
        assert back.to_json() == man.to_json()

    def test_truncated_image_rejected(self, tmp_path):
        man = _manifest(tmp_path)
        rng = np.random.default_rng(4)
        img = rng.random((3, 16, 16)).astype(np.float32)
        labels = np.zeros((16, 16), dtype=np.uint8)
        sample = LabeledSample(ChannelStack(img, _meta()), labels, "s00000", 4)
        d = tmp_path / "samples" / "s00000"
        save_sample(sample, d)
        (d / "image.bin").write_bytes((d / "image.bin").read_bytes()[:-8])
        with pytest.raises(ValidationError, match="size mismatch"):
            load_sample(d, man)

    def test_corrupt_label_rejected(self, tmp_path):
        man = _manifest(tmp_path)
        img = np.zeros((3, 16, 16), dtype=np.float32)
        labels = np.zeros((16, 16), dtype=np.uint8)
        sample = LabeledSample(ChannelStack(img, _meta()), labels, "s00000", 4)
        d = tmp_path / "samples" / "s00000"
        save_sample(sample, d)
        raw = bytearray((d / "labels.bin").read_bytes())
        raw[0] = 200  # not a class, not the ignore sentinel
        (d / "labels.bin").write_bytes(bytes(raw))
        with pytest.raises(ValidationError, match="label out of range"):
            load_sample(d, man)


class TestValidateManifest:
    def _write_full(self, tmp_path):
        man = _manifest(tmp_path)
        rng = np.random.default_rng(5)
        for sid in ("s00000", "s00001"):
            img = rng.random((3, 16, 16)).astype(np.float32)
            labels = rng.integers(0, 4, (16, 16)).astype(np.uint8)
            save_sample(LabeledSample(ChannelStack(img, _meta()), labels, sid, 4),
                        tmp_path / "samples" / sid)
        man.save()
        return man

    def test_clean_dataset_has_no_violations(self, tmp_path):
        man = self._write_full(tmp_path)
        assert validate_manifest(man) == []

    def test_overlapping_splits_reported(self, tmp_path):
        man = self._write_full(tmp_path)
        bad = _manifest(tmp_path, splits={"train": ["s00000"], "test": ["s00000"]})
        problems = validate_manifest(bad)
        assert any("overlapping splits" in p for p in problems)

    def test_missing_sample_reported(self, tmp_path):
        man = self._write_full(tmp_path)
        bad = _manifest(tmp_path, splits={"train": ["s00000", "s99999"],
                                          "test": ["s00001"]})
        problems = validate_manifest(bad)
        assert any("s99999" in p for p in problems)
