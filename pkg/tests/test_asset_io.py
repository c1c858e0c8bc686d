import numpy as np
import pytest

from asset_io import FormatError, load_image, save_image


def test_single_channel_pfm_keeps_two_dimensions(tmp_path):
    raster = np.random.default_rng(0).uniform(-2.0, 2.0, size=(5, 7))

    path = save_image(tmp_path / "depth.pfm", raster)

    assert path.read_bytes().startswith(b"Pf\n7 5\n")
    loaded = load_image(path)
    assert loaded.shape == (5, 7)
    np.testing.assert_allclose(loaded, raster.astype(np.float32))


def test_colour_pfm_keeps_channels(tmp_path):
    raster = np.random.default_rng(1).uniform(size=(4, 3, 3))

    path = save_image(tmp_path / "atlas.pfm", raster)

    assert path.read_bytes().startswith(b"PF\n3 4\n")
    np.testing.assert_allclose(load_image(path), raster.astype(np.float32))


def test_pfm_rejects_other_channel_counts(tmp_path):
    with pytest.raises(ValueError, match="PFM holds"):
        save_image(tmp_path / "rgba.pfm", np.zeros((2, 2, 4)))


def test_short_pfm_reports_pixel_offset(tmp_path):
    path = tmp_path / "short.pfm"
    path.write_bytes(b"Pf\n2 2\n-1.0\n" + bytes(12))

    with pytest.raises(FormatError, match="expected 16 pixel bytes") as error:
        load_image(path)
    assert error.value.offset == len(b"Pf\n2 2\n-1.0\n")
