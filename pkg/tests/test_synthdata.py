import dataclasses
import json

import numpy as np
import pytest

from longtail_lab import synthdata
from longtail_lab.catalog import bin_of
from longtail_lab.errors import ConfigError, DataError
from longtail_lab.synthdata import SynthConfig

from conftest import SMALL


def _files(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


class TestGenerate:
    def test_same_seed_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        synthdata.serialize(synthdata.generate(dataclasses.replace(SMALL, seed=7)), a)
        synthdata.serialize(synthdata.generate(dataclasses.replace(SMALL, seed=7)), b)
        assert _files(a) == _files(b)

    def test_different_seed_differs(self):
        a = synthdata.generate(dataclasses.replace(SMALL, seed=7))
        b = synthdata.generate(dataclasses.replace(SMALL, seed=8))
        assert a != b

    def test_reference_counts_span_all_bins(self):
        # Bin edges for 5000 * r**-1.5 rounded: count < 10 iff r >= 66,
        # count >= 100 iff r <= 13, count >= 1000 iff r <= 2.
        cfg = SynthConfig()
        assert synthdata.zipf_exponent_for(100, 5, 5000) == pytest.approx(cfg.zipf_exponent)
        counts = synthdata.power_law_counts(cfg)
        hist = {b: sum(1 for c in counts if bin_of(int(c)) == b) for b in range(1, 5)}
        assert hist == {1: 35, 2: 52, 3: 11, 4: 2}
        assert counts[0] == 5000 and counts[-1] == 5

    def test_count_law(self, small_dataset):
        counts = np.array(small_dataset.catalog.counts)
        assert np.all(np.diff(counts) <= 0)
        assert counts.min() >= SMALL.min_count and counts.max() <= SMALL.max_count

    def test_catalog_matches_train_labels(self, small_dataset):
        ds = small_dataset
        occ = np.bincount(ds.train.labels, minlength=ds.catalog.num_classes)[1:]
        assert tuple(occ) == ds.catalog.counts

    def test_eval_is_balanced(self, small_dataset):
        ds = small_dataset
        occ = np.bincount(ds.eval.labels, minlength=ds.catalog.num_classes)
        assert np.all(occ[1:] == SMALL.eval_per_class)
        assert occ[0] == round(12 * 4 * 0.5 / 0.5)

    def test_zero_noise_gives_prototypes(self):
        cfg = dataclasses.replace(SMALL, noise_sigma=0.0)
        ds = synthdata.generate(cfg)
        protos = synthdata.class_prototypes(cfg)
        fg = ds.train.labels > 0
        assert np.array_equal(ds.train.features[fg], protos[ds.train.labels[fg]])

    def test_image_structure(self):
        cfg = SynthConfig()
        ds = synthdata.generate(cfg)
        target_bg = cfg.proposals_per_image * cfg.bg_fraction
        for idx in ds.images().values():
            assert len(idx) == cfg.proposals_per_image
            n_bg = int(np.sum(ds.train.labels[idx] == 0))
            assert abs(n_bg - target_bg) <= 1

    def test_features_shape_and_labels(self, small_dataset):
        ds = small_dataset
        assert ds.train.features.shape == (len(ds.train), SMALL.feature_dim)
        assert ds.train.labels.min() >= 0 and ds.train.labels.max() <= SMALL.num_foreground
        assert np.isfinite(ds.train.features).all()

    def test_nearest_prototype_separability(self):
        # Brute-force nearest-prototype oracle on the reference geometry.
        cfg = SynthConfig()
        ds = synthdata.generate(cfg)
        protos = synthdata.class_prototypes(cfg)[1:]
        fg = ds.eval.labels > 0
        X, y = ds.eval.features[fg], ds.eval.labels[fg]
        correct = 0
        for h, label in zip(X, y):
            d2 = [float(np.sum((h - p) ** 2)) for p in protos]
            correct += int(np.argmin(d2)) + 1 == label
        assert correct / len(y) >= 0.99

    @pytest.mark.parametrize(
        "change",
        [
            {"num_foreground": 0},
            {"feature_dim": 1},
            {"bg_fraction": 1.0},
            {"min_count": 0},
            {"eval_per_class": 0},
        ],
    )
    def test_invalid_config(self, change):
        with pytest.raises(ConfigError):
            synthdata.generate(dataclasses.replace(SMALL, **change))


class TestSerialization:
    def test_round_trip(self, small_dataset, tmp_path):
        synthdata.serialize(small_dataset, tmp_path)
        assert synthdata.deserialize(tmp_path) == small_dataset

    def test_blob_is_little_endian_float32(self, small_dataset, tmp_path):
        synthdata.serialize(small_dataset, tmp_path)
        raw = (tmp_path / "features.bin").read_bytes()
        first = np.frombuffer(raw[: 4 * SMALL.feature_dim], dtype="<f4")
        np.testing.assert_array_equal(first, small_dataset.train.features[0])
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["records"][0] == [int(small_dataset.train.labels[0]), 0, "train"]
        assert manifest["catalog"]["num_foreground"] == SMALL.num_foreground

    def test_dimension_mismatch(self, tmp_path):
        three = synthdata.generate(dataclasses.replace(SMALL, num_foreground=3))
        four = synthdata.generate(dataclasses.replace(SMALL, num_foreground=4))
        synthdata.serialize(three, tmp_path / "a")
        synthdata.serialize(four, tmp_path / "b")
        (tmp_path / "a" / "features.bin").write_bytes((tmp_path / "b" / "features.bin").read_bytes())
        with pytest.raises(DataError, match="dimension mismatch"):
            synthdata.deserialize(tmp_path / "a")

    def test_truncated_blob(self, small_dataset, tmp_path):
        synthdata.serialize(small_dataset, tmp_path)
        blob = tmp_path / "features.bin"
        blob.write_bytes(blob.read_bytes()[:-3])
        with pytest.raises(DataError, match="truncated"):
            synthdata.deserialize(tmp_path)

    def test_corrupt_header(self, small_dataset, tmp_path):
        synthdata.serialize(small_dataset, tmp_path)
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(DataError, match="corrupt"):
            synthdata.deserialize(tmp_path)

    def test_empty_train_split(self, small_dataset, tmp_path):
        synthdata.serialize(small_dataset, tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        for r in m["records"]:
            r[2] = "eval"
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(DataError, match="empty train"):
            synthdata.deserialize(tmp_path)

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(DataError):
            synthdata.deserialize(tmp_path / "nope")
