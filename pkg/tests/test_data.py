import gzip
import math
import struct

import numpy as np
import pytest

from artifact.autodiff import Tensor
from artifact.data import (IDX_UBYTE_3D, N_VIEWS, VIEW_ANGLES, IdxFormatError, ImageDataset, batches,
                           batches_per_epoch, chair, concat, cross, cube, load_idx, load_named, make_synthetic,
                           render_views, sphere, write_idx)
from artifact.objectives import NoiseSource
from artifact.render import project, rotate_voxels


def minimal_header(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        head = fh.read(16)
    return tuple(int.from_bytes(head[i:i + 4], "big") for i in range(0, 16, 4))


@pytest.fixture(scope="module")
def mnist_digits():
    mlxtend = pytest.importorskip("mlxtend.data")
    X, _ = mlxtend.mnist_data()
    return X.reshape(-1, 28, 28).astype(np.uint8)


class TestIdx:
    def test_mnist_header_matches_minimal_reader(self, tmp_path, mnist_digits):
        path = tmp_path / "train-images-idx3-ubyte.gz"
        write_idx(path, mnist_digits)
        magic, n, rows, cols = minimal_header(path)
        ds = load_idx(path)
        assert magic == IDX_UBYTE_3D
        assert ds.images.shape == (n, rows, cols) == (len(mnist_digits), 28, 28)
        np.testing.assert_array_equal(ds.images, mnist_digits / np.float32(255.0))

    def test_all_zero_file(self, tmp_path):
        path = tmp_path / "zeros"
        path.write_bytes(struct.pack(">IIII", 0x803, 2, 28, 28) + bytes(2 * 28 * 28))
        ds = load_idx(path)
        assert ds.images.shape == (2, 28, 28) and not ds.images.any()

    def test_pixels_scaled_to_unit_range(self, tmp_path):
        path = tmp_path / "ramp"
        write_idx(path, np.array([[[0, 51], [204, 255]]], dtype=np.uint8))
        np.testing.assert_allclose(load_idx(path).images[0], [[0.0, 0.2], [0.8, 1.0]], atol=1e-7)

    def test_truncated_reports_byte_counts(self, tmp_path):
        path = tmp_path / "short"
        path.write_bytes(struct.pack(">IIII", 0x803, 2, 28, 28) + bytes(1000))
        with pytest.raises(IdxFormatError, match=r"expected 1568 bytes.*got 1000"):
            load_idx(path)

    def test_oversized(self, tmp_path):
        path = tmp_path / "long"
        path.write_bytes(struct.pack(">IIII", 0x803, 1, 2, 2) + bytes(5))
        with pytest.raises(IdxFormatError, match="oversized"):
            load_idx(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "labels"
        path.write_bytes(struct.pack(">II", 0x801, 3) + bytes(3) + bytes(8))
        with pytest.raises(IdxFormatError, match="magic"):
            load_idx(path)

    def test_short_header(self, tmp_path):
        path = tmp_path / "tiny"
        path.write_bytes(b"\x00\x00")
        with pytest.raises(IdxFormatError):
            load_idx(path)


class TestShapes:
    def test_cube_view_closed_form(self):
        img = project(Tensor(cube(28, 8), dtype=np.float64)).data
        lit = img > 0
        assert lit.sum() == 64
        rows, cols = np.nonzero(lit)
        assert rows.max() - rows.min() == 7 and cols.max() - cols.min() == 7
        np.testing.assert_allclose(img[lit], 1 - math.exp(-8), rtol=1e-12)

    def test_grids_are_binary(self):
        for g in (cube(), sphere(), cross(), chair()):
            assert set(np.unique(g)) <= {0.0, 1.0} and g.any()

    def test_sphere_views_agree(self):
        views = render_views(sphere(28, 7.0))
        for k in range(1, N_VIEWS):
            # nearest resampling moves single voxels on the rim and changes depth counts by one
            assert np.mean((views[k] - views[0]) ** 2) < 0.01
            assert np.mean((views[k] > 0.5) != (views[0] > 0.5)) < 0.02

    def test_chair_has_no_rotational_symmetry(self):
        views = render_views(chair())
        for k in range(1, N_VIEWS):
            assert np.mean((views[k] - views[0]) ** 2) > 1e-3


class TestSynthetic:
    def test_twelve_views_from_own_renderer(self):
        s = make_synthetic("cross", 2, NoiseSource(0))
        assert s.images.shape == (2, 12, 28, 28)
        np.testing.assert_allclose(VIEW_ANGLES, np.arange(12) * math.pi / 6)
        for g, imgs in zip(s.grids, s.images):
            for k, th in enumerate(s.thetas):
                fresh = project(rotate_voxels(Tensor(g), th, 0.0, "nearest")).data
                np.testing.assert_array_equal(imgs[k], fresh)

    def test_seeded(self):
        a = make_synthetic("chair", 3, NoiseSource(4))
        b = make_synthetic("chair", 3, NoiseSource(4))
        assert a.images.tobytes() == b.images.tobytes() and a.params == b.params

    def test_as_image_dataset_keeps_pose_labels(self):
        ds = make_synthetic("cube", 2, NoiseSource(1)).as_image_dataset()
        assert len(ds) == 24 and ds.source == "synthetic"
        np.testing.assert_allclose(ds.poses[12:], VIEW_ANGLES)

    def test_errors(self):
        with pytest.raises(ValueError):
            make_synthetic("torus", 1, NoiseSource(0))
        with pytest.raises(ValueError):
            make_synthetic("cube", 0, NoiseSource(0))


class TestBatches:
    def test_batches_per_epoch(self):
        ds = ImageDataset(np.zeros((10, 28, 28), np.float32), "x")
        stream = batches(ds, 4, NoiseSource(0))
        epochs = [next(stream)[0] for _ in range(5)]
        assert epochs == [0, 0, 1, 1, 2]
        assert batches_per_epoch(10, 4) == 2

    def test_same_seed_same_order(self):
        ds = ImageDataset(np.arange(9.0).reshape(9, 1, 1).repeat(28, 1).repeat(28, 2) / 9, "x")
        a, b = batches(ds, 3, NoiseSource(8)), batches(ds, 3, NoiseSource(8))
        for _ in range(6):
            np.testing.assert_array_equal(next(a)[1], next(b)[1])

    def test_epoch_covers_all_but_remainder(self):
        n, bs = 23, 5
        ds = ImageDataset(np.zeros((n, 28, 28), np.float32), "x")
        stream = batches(ds, bs, NoiseSource(2))
        seen = np.concatenate([next(stream)[1] for _ in range(n // bs)])
        assert len(seen) == len(set(seen.tolist())) == n - n % bs
        assert set(seen.tolist()) <= set(range(n))

    def test_emitted_batches_are_read_only(self):
        ds = ImageDataset(np.zeros((4, 28, 28), np.float32), "x")
        _, _, images = next(batches(ds, 2, NoiseSource(0)))
        with pytest.raises(ValueError):
            images[0, 0, 0] = 1.0
        assert not ds.images.any()

    def test_bad_sizes(self):
        ds = ImageDataset(np.zeros((4, 28, 28), np.float32), "x")
        with pytest.raises(ValueError):
            next(batches(ds, 1, NoiseSource(0)))
        with pytest.raises(ValueError):
            next(batches(ds, 5, NoiseSource(0)))


class TestLoadNamed:
    def test_idx_layout(self, tmp_path):
        (tmp_path / "fashion").mkdir()
        write_idx(tmp_path / "fashion" / "train-images-idx3-ubyte", np.zeros((3, 28, 28), np.uint8))
        ds = load_named("fashion", tmp_path)
        assert len(ds) == 3 and ds.source == "fashion"

    def test_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_named("mnist", tmp_path)
        with pytest.raises(FileNotFoundError):
            load_named("mnist", None)

    def test_mixed_concatenates(self, tmp_path):
        for name, n in (("mnist", 2), ("fashion", 3)):
            (tmp_path / name).mkdir()
            write_idx(tmp_path / name / "train-images-idx3-ubyte.gz", np.zeros((n, 28, 28), np.uint8))
        ds = load_named("mixed", tmp_path, n_shapes=1)
        assert len(ds) == 2 + 3 + 12 and ds.source == "mixed"

    def test_limit(self):
        assert len(load_named("synthetic", limit=5, n_shapes=1)) == 5

    def test_concat(self):
        a = ImageDataset(np.zeros((2, 28, 28), np.float32), "a")
        assert len(concat([a, a])) == 4
