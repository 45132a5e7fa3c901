import struct

import numpy as np
import pytest

from dynopool import data as D


def _ramp(n=2, size=8, axis=2):
    ramp = np.linspace(0.0, 1.0, size, dtype=np.float32)
    shape = [1, 1, 1, 1]
    shape[axis] = size
    img = np.broadcast_to(ramp.reshape(shape), (n, 1, size, size)).copy()
    return D.Dataset(img, np.zeros(n, np.int64), 2)


def _horizontal_energy(images):
    """Contrast-normalized horizontal gradient energy, one value per image."""
    x = images[:, 0].astype(np.float64)
    smooth = (x[:, :-2] + x[:, 1:-1] + x[:, 2:]) / 3.0
    diff = np.diff(smooth, axis=2)
    centered = smooth - smooth.mean(axis=2, keepdims=True)
    return (diff ** 2).sum(axis=(1, 2)) / (centered ** 2).sum(axis=(1, 2))


@pytest.fixture(scope="module")
def base():
    return D.make_base(seed=3, n=400, k=4, size=16)


class TestGeneration:
    def test_deterministic(self):
        a = D.generate("base", 5, 32, 4, 16)
        b = D.generate("base", 5, 32, 4, 16)
        assert a.images.tobytes() == b.images.tobytes()
        assert np.array_equal(a.labels, b.labels)

    def test_seed_changes_data(self):
        assert not np.array_equal(D.make_base(0, 8, 2, 16).images, D.make_base(1, 8, 2, 16).images)

    def test_range_dtype_balance(self, base):
        assert base.images.dtype == np.float32
        assert base.images.min() >= 0.0 and base.images.max() <= 1.0
        assert np.bincount(base.labels).tolist() == [100] * 4

    def test_periods_are_ordered(self):
        p = D.class_periods(4)
        assert p[0] == pytest.approx(2.4) and p[-1] == pytest.approx(4.0)
        assert np.all(np.diff(p) > 0)

    def test_two_class_oracle_separates(self):
        """A fixed hand-made feature separates the classes, so labels are learnable."""
        train = D.make_base(seed=10, n=400, k=2, size=16)
        test = D.make_base(seed=11, n=400, k=2, size=16)
        f_train, f_test = _horizontal_energy(train.images), _horizontal_energy(test.images)
        cut = 0.5 * (np.median(f_train[train.labels == 0]) + np.median(f_train[train.labels == 1]))
        # class 0 has the shortest period and the most horizontal energy
        acc = np.mean((f_test < cut).astype(int) == test.labels)
        assert acc > 0.9

    @pytest.mark.parametrize("size, k", [(7, 2), (16, 1)])
    def test_bad_arguments(self, size, k):
        with pytest.raises(ValueError):
            D.make_base(0, 4, k, size)

    def test_unknown_transform(self):
        with pytest.raises(ValueError, match="unknown transform"):
            D.generate("rotate", 0, 4, 2, 16)

    @pytest.mark.parametrize("transform", ["tile", "large"])
    def test_odd_size_rejected(self, transform):
        with pytest.raises(ValueError, match="odd size"):
            D.generate(transform, 0, 4, 2, 15)


class TestTransforms:
    def test_resample_identity(self, base):
        np.testing.assert_allclose(D.resample_axis(base.images, 2, 16), base.images, atol=1e-6)

    @pytest.mark.parametrize("fn", [D.transform_stretch_v, D.transform_stretch_h, D.transform_tile, D.transform_large])
    def test_constant_stays_constant(self, fn):
        ds = D.Dataset(np.full((3, 1, 8, 8), 0.4, np.float32), np.zeros(3, np.int64), 2)
        np.testing.assert_allclose(fn(ds).images, 0.4, atol=1e-6)

    def test_stretch_v_halves_vertical_slope(self):
        ds = _ramp(n=6, axis=2)
        out = D.transform_stretch_v(ds, seed=4)
        assert out.images.shape == ds.images.shape
        slope = np.diff(out.images[:, 0, 1:-1, 0], axis=1)
        # source slope is 1/7 per row; a x2 stretch halves it away from the clamped border
        interior = slope[np.abs(slope) > 1e-6]
        np.testing.assert_allclose(interior, 0.5 / 7, atol=1e-5)
        # columns are untouched
        assert np.ptp(out.images, axis=3).max() < 1e-6

    def test_stretch_h_is_transposed_stretch_v(self, base):
        sub = base.subset(np.arange(5))
        flipped = D.Dataset(sub.images.transpose(0, 1, 3, 2).copy(), sub.labels, sub.num_classes)
        np.testing.assert_array_equal(
            D.transform_stretch_h(sub, 2).images,
            D.transform_stretch_v(flipped, 2).images.transpose(0, 1, 3, 2),
        )

    def test_tile_is_periodic(self, base):
        out = D.transform_tile(base.subset(np.arange(4))).images
        assert out.shape[2:] == (32, 32)
        np.testing.assert_array_equal(out[:, :, :8], out[:, :, 8:16])
        np.testing.assert_array_equal(out[:, :, :, :8], out[:, :, :, 24:])

    def test_large_is_double_size(self, base):
        assert D.transform_large(base.subset(np.arange(2))).images.shape == (2, 1, 32, 32)

    def test_tile_crop_upsampled_matches_large(self):
        ds = _ramp(n=2, size=16, axis=3)
        crop = D.transform_tile(ds).images[:, :, :8, :8]
        up = D.resample_axis(D.resample_axis(crop, 2, 32), 3, 32)
        assert np.abs(up - D.transform_large(ds).images).mean() < 0.05

    def test_labels_preserved(self, base):
        sub = base.subset(np.arange(10))
        for name in ("stretch_v", "stretch_h", "tile", "large"):
            fn = getattr(D, f"transform_{name}")
            assert np.array_equal(fn(sub).labels, sub.labels)


class TestSplit:
    def test_disjoint_and_complete(self, base):
        train, held = D.split(base, seed=0)
        assert len(train) + len(held) == len(base)
        assert len(held) == 40

    def test_reproducible(self, base):
        assert np.array_equal(D.split(base, 1)[1].labels, D.split(base, 1)[1].labels)


class TestFileFormat:
    def test_round_trip(self, base, tmp_path):
        path = tmp_path / "d.dynp"
        D.save(base, path)
        back = D.load(path)
        assert back.num_classes == 4
        assert np.array_equal(back.labels, base.labels)
        np.testing.assert_allclose(back.images, base.images, atol=0.5 / 255 + 1e-7)

    def test_save_is_byte_stable(self, base, tmp_path):
        D.save(base, tmp_path / "a")
        D.save(D.load(tmp_path / "a"), tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def _corrupt(self, base, tmp_path, edit):
        path = tmp_path / "bad.dynp"
        D.save(base.subset(np.arange(3)), path)
        raw = bytearray(path.read_bytes())
        path.write_bytes(bytes(edit(raw)))
        return path

    def test_bad_magic(self, base, tmp_path):
        path = self._corrupt(base, tmp_path, lambda r: b"XXXX" + r[4:])
        with pytest.raises(D.DatasetFormatError, match="magic"):
            D.load(path)

    def test_bad_version(self, base, tmp_path):
        path = self._corrupt(base, tmp_path, lambda r: r[:4] + struct.pack("<I", 9) + r[8:])
        with pytest.raises(D.DatasetFormatError, match="version"):
            D.load(path)

    def test_truncated(self, base, tmp_path):
        with pytest.raises(D.DatasetFormatError, match="size"):
            D.load(self._corrupt(base, tmp_path, lambda r: r[:-1]))
        with pytest.raises(D.DatasetFormatError, match="short"):
            D.load(self._corrupt(base, tmp_path, lambda r: r[:10]))

    def test_label_out_of_range(self, base, tmp_path):
        path = self._corrupt(base, tmp_path, lambda r: r[:-2] + struct.pack("<H", 4))
        with pytest.raises(D.DatasetFormatError, match="out of range"):
            D.load(path)
