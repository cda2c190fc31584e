import hashlib

import numpy as np
import pytest

from invisp import isp, synth


def reference_isp(linear):
    """Pixel-at-a-time statement of the reference rendering."""
    m = np.array([[1.50, -0.35, -0.15], [-0.20, 1.40, -0.20], [-0.05, -0.45, 1.50]])
    out = np.zeros(linear.shape, dtype=np.uint8)
    for i in range(linear.shape[1]):
        for j in range(linear.shape[2]):
            v = np.clip(m @ linear[:, i, j], 0, 1)
            v = (2 * v / (1 + v)) ** (1 / 2.2)
            out[:, i, j] = np.floor(v * 255 + 0.5)
    return out


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def images():
    return synth.generate(3, 32, seed=7)


class TestGenerate:
    def test_shapes_and_metadata(self, images):
        item = images[0]
        assert item.frame.shape == (32, 32)
        assert item.frame.pattern == "RGGB" and item.frame.bit_depth == 14
        assert item.frame.wb_gains == synth.WB_GAINS
        assert item.linear.shape == (3, 32, 32)
        assert item.target.dtype == np.uint8 and item.target.shape == (3, 32, 32)

    def test_deterministic(self, images):
        again = synth.generate(3, 32, seed=7)
        for a, b in zip(images, again):
            np.testing.assert_array_equal(a.frame.mosaic, b.frame.mosaic)
            np.testing.assert_array_equal(a.target, b.target)

    def test_seed_changes_content(self, images):
        other = synth.generate(1, 32, seed=8)[0]
        assert not np.array_equal(other.frame.mosaic, images[0].frame.mosaic)

    def test_mosaic_on_14bit_grid(self, images):
        codes = images[0].frame.mosaic * 16383
        np.testing.assert_allclose(codes, np.rint(codes), atol=1e-9)

    def test_target_matches_reference_rendering(self, images):
        for item in images:
            np.testing.assert_array_equal(item.target, reference_isp(item.linear))

    def test_linear_is_balanced_demosaic(self, images):
        f = images[1].frame
        expected = isp.demosaic_array(isp.white_balance(f).mosaic, f.pattern)
        np.testing.assert_array_equal(images[1].linear, expected)

    def test_tone_range_is_used(self, images):
        t = np.concatenate([i.target.ravel() for i in images])
        assert int(t.max()) - int(t.min()) > 100

    def test_odd_size_rejected(self):
        with pytest.raises(ValueError):
            synth.generate(1, 31)

    def test_tone_curve(self):
        np.testing.assert_allclose(synth.tone_curve(np.array([0.0, 1.0, 0.5])), [0.0, 1.0, 2 / 3])


class TestDataset:
    def test_byte_identical_per_seed(self, tmp_path):
        synth.synth_data(2, 16, 3, tmp_path / "a")
        synth.synth_data(2, 16, 3, tmp_path / "b")
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert "manifest.json" in files and "0001_target.png" in files and "0000.json" in files
        for name in files:
            assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name)

    def test_read_back(self, tmp_path):
        made = synth.synth_data(2, 16, 3, tmp_path)
        back = synth.read_dataset(tmp_path)
        for a, b in zip(made, back):
            np.testing.assert_array_equal(a.target, b.target)
            np.testing.assert_array_equal(a.linear, b.linear)
            np.testing.assert_allclose(a.frame.mosaic, b.frame.mosaic, atol=1e-12)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            synth.read_dataset(tmp_path)
