import dataclasses
import struct

import numpy as np
import pytest

from biasguide import data
from biasguide.errors import ConfigError, FormatError


def cfg(**kw):
    base = dict(per_class_count=200, test_per_class=40, image_size=16)
    base.update(kw)
    return data.DataConfig(**base)


class TestGenerate:
    def test_bc_count_per_class(self):
        c = data.DataConfig(per_class_count=2000, severity=0.01, test_per_class=10, image_size=16)
        ds = data.generate(c, seed=3)
        for y in range(2):
            m = ds.train.labels == y
            assert (~ds.train.bias_aligned[m]).sum() == 20

    @pytest.mark.parametrize("severity", data.SEVERITY_GRID)
    def test_severity_grid_accepted(self, severity):
        c = cfg(per_class_count=400, severity=severity)
        ds = data.generate(c, seed=0)
        assert (~ds.train.bias_aligned).sum() == 2 * round(severity * 400)

    @pytest.mark.parametrize("severity", [0.0, -0.01, 0.51])
    def test_severity_out_of_range(self, severity):
        with pytest.raises(ConfigError, match="severity"):
            data.generate(cfg(severity=severity))

    def test_deterministic(self):
        a, b = data.generate(cfg(), 5), data.generate(cfg(), 5)
        assert a.digest() == b.digest()
        np.testing.assert_array_equal(a.train.images, b.train.images)

    def test_seed_changes_data(self):
        assert data.generate(cfg(), 1).digest() != data.generate(cfg(), 2).digest()

    def test_images_in_unit_range(self, tiny_dataset):
        for split in (tiny_dataset.train, tiny_dataset.test):
            assert split.images.min() >= 0 and split.images.max() <= 1

    @pytest.mark.parametrize("classes", [2, 6])
    def test_test_split_is_balanced(self, classes):
        ds = data.generate(cfg(classes=classes, test_per_class=41), seed=0)
        for y in range(classes):
            m = ds.test.labels == y
            ba = ds.test.bias_aligned[m].sum()
            assert abs(int(ba) - int((~ds.test.bias_aligned[m]).sum())) <= 1

    def test_ids_are_unique_across_splits(self, tiny_dataset):
        ids = np.concatenate([tiny_dataset.train.ids, tiny_dataset.test.ids])
        assert len(np.unique(ids)) == len(ids)

    def test_view_hides_bias_flags(self, tiny_dataset):
        view = tiny_dataset.train.view()
        assert not hasattr(view, "bias_aligned")
        assert {f.name for f in dataclasses.fields(view)} == {"ids", "images", "labels"}

    def test_colour_is_an_easy_cue(self):
        # least-squares linear probe on mean RGB, fitted and scored on BA samples
        ds = data.generate(data.DataConfig(per_class_count=500, image_size=32, test_per_class=10), seed=1)
        ba = ds.train.bias_aligned
        feats = ds.train.images[ba].mean(axis=(1, 2))
        X = np.hstack([feats, np.ones((len(feats), 1))])
        Y = np.eye(2)[ds.train.labels[ba]]
        coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
        acc = (np.argmax(X @ coef, axis=1) == ds.train.labels[ba]).mean()
        assert acc > 0.95

    def test_shape_defines_the_class(self):
        # with colour held fixed, the two classes still differ in their object masks
        c = cfg()
        a = data.render("disk", data.NEUTRAL, np.zeros(2, int), c, 0.0)
        b = data.render("cross", data.NEUTRAL, np.zeros(2, int), c, 0.0)
        assert np.abs(a - b).max() > 0.3


class TestFile:
    def test_round_trip(self, tmp_path, tiny_dataset):
        path = tmp_path / "d.bgd"
        data.export(tiny_dataset, path)
        back = data.load(path)
        assert back.config == tiny_dataset.config
        assert back.seed == tiny_dataset.seed
        assert back.digest() == tiny_dataset.digest()
        for name in ("ids", "labels", "bias_aligned", "images"):
            np.testing.assert_array_equal(getattr(back.train, name), getattr(tiny_dataset.train, name))

    def test_truncated(self, tmp_path, tiny_dataset):
        path = tmp_path / "d.bgd"
        data.export(tiny_dataset, path)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(FormatError, match="byte offset"):
            data.load(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "d.bgd"
        path.write_bytes(data.DATA_MAGIC + b"\0\0")
        with pytest.raises(FormatError, match="byte offset 10"):
            data.load(path)

    def test_version_mismatch_names_both(self, tmp_path, tiny_dataset):
        path = tmp_path / "d.bgd"
        data.export(tiny_dataset, path)
        raw = bytearray(path.read_bytes())
        struct.pack_into("<I", raw, 8, 7)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match=r"version 7 .* version 1"):
            data.load(path)

    def test_corrupt_flag(self, tmp_path, tiny_dataset):
        path = tmp_path / "d.bgd"
        data.export(tiny_dataset, path)
        raw = bytearray(path.read_bytes())
        raw[data._HEADER.size + 12] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="corrupt record 0"):
            data.load(path)


class TestSampling:
    def test_epoch_covers_every_position(self):
        s = data.BatchSampler(10, 5, np.random.default_rng(0))
        seen = np.concatenate([s.next(), s.next()])
        assert sorted(seen) == list(range(10))

    def test_flip_mirrors_columns(self):
        x = np.arange(2 * 3 * 4 * 3, dtype=float).reshape(2, 3, 4, 3)
        out = data.random_flip(x, np.random.default_rng(1))
        for a, b in zip(x, out):
            assert np.array_equal(a, b) or np.array_equal(a[:, ::-1], b)
