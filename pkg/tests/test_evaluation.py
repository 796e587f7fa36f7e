"""DSM extraction and the surface / image / shading / transient metrics.

    MAE  = mean |h - h_gt| over cells valid in both rasters
    PSNR = 10 log10(1 / MSE)
The extraction tests use an analytic field: an opaque half-space below a
horizontal plane, so the expected surface is known exactly.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from services.dsm_io import NODATA, DsmRaster
from services.errors import DataMismatchError
from services.evaluation import extract_dsm, mae, psnr, raster_shape, shading_accuracy, transient_residue
from services.field import FieldOutput
from services.geometry import AffineCamera, sun_vector
from services.sampler import GridConfig, OccupancyGrid


# ── Helpers ──────────────────────────────────────────────────────────────

class PlaneField(torch.nn.Module):
    """Density 1e4 below normalized altitude `level`; shading 1 west of x = 0.5."""

    def __init__(self, level: float):
        super().__init__()
        self.level = level
        self.anchor = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def forward(self, x: torch.Tensor, sun: torch.Tensor) -> FieldOutput:
        n = x.shape[0]
        sigma = torch.where(x[:, 2] < self.level, torch.full((n,), 1e4, dtype=x.dtype),
                            torch.zeros(n, dtype=x.dtype))
        shading = (x[:, 0] < 0.5).to(x.dtype)
        return FieldOutput(sigma, torch.full((n, 3), 0.5, dtype=x.dtype), shading,
                           torch.full((n, 3), 0.3, dtype=x.dtype))


def _flat(values, cell: float = 1.0) -> DsmRaster:
    return DsmRaster(0.0, 0.0, cell, np.asarray(values, dtype=np.float64))


def _nadir_camera(size: int = 8) -> AffineCamera:
    return AffineCamera(size, size, 128.0 / size, 0.0, 0.0, 435064.0, 3354064.0, 40.0)


# ── Extraction ──────────────────────────────────────────────────────────

class TestExtractDsm:

    def test_raster_shape(self, bounds):
        assert raster_shape(bounds, 0.5) == (256, 256)
        assert raster_shape(bounds, 3.0) == (43, 43)

    def test_empty_field_is_all_nodata(self, bounds):
        dsm = extract_dsm(PlaneField(-1.0), None, bounds, cell_size=16.0, max_samples=32)
        assert dsm.altitudes.shape == (8, 8)
        assert not dsm.valid.any()
        assert np.all(dsm.altitudes == NODATA)

    @pytest.mark.parametrize("level", [0.25, 0.6])
    def test_plane_altitude_recovered(self, bounds, level):
        dsm = extract_dsm(PlaneField(level), None, bounds, cell_size=16.0, max_samples=256)
        assert dsm.valid.all()
        expected = bounds.utm_min[2] + level * bounds.extent[2]
        assert np.all(np.abs(dsm.altitudes - expected) <= 2 * bounds.extent[2] / 256)

    def test_like_reuses_grid(self, bounds):
        like = DsmRaster(435032.0, 3354032.0, 8.0, np.zeros((4, 6)))
        dsm = extract_dsm(PlaneField(0.5), None, bounds, max_samples=64, like=like)
        assert dsm.same_grid(like)

    def test_origin_is_scene_corner(self, bounds):
        dsm = extract_dsm(PlaneField(0.5), None, bounds, cell_size=32.0, max_samples=16)
        assert (dsm.origin_easting, dsm.origin_northing, dsm.cell_size) == (435000.0, 3354000.0, 32.0)

    def test_repeat_extraction_is_identical(self, bounds, model):
        grid = OccupancyGrid(GridConfig(resolution=8))
        a = extract_dsm(model, grid, bounds, cell_size=16.0, max_samples=32)
        b = extract_dsm(model, grid, bounds, cell_size=16.0, max_samples=32)
        np.testing.assert_array_equal(a.altitudes, b.altitudes)


# ── Surface error ───────────────────────────────────────────────────────

class TestMae:

    def test_identical(self):
        a = _flat([[1.0, 2.0], [3.0, 4.0]])
        assert mae(a, _flat(a.altitudes)) == (0.0, 4)

    def test_constant_offset(self):
        a = _flat([[1.0, 2.0], [3.0, 4.0]])
        value, count = mae(_flat(a.altitudes + 1.0), a)
        assert value == pytest.approx(1.0) and count == 4

    def test_matches_loop_over_shared_cells(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(20, 5, (12, 9)), rng.normal(20, 5, (12, 9))
        a[rng.random(a.shape) < 0.2] = NODATA
        b[rng.random(b.shape) < 0.2] = NODATA
        diffs = [abs(x - y) for x, y in zip(a.ravel(), b.ravel()) if x != NODATA and y != NODATA]
        value, count = mae(_flat(a), _flat(b))
        assert count == len(diffs)
        assert value == pytest.approx(sum(diffs) / len(diffs), rel=1e-12)

    def test_median_alignment_removes_bias(self):
        gt = _flat(np.arange(12.0).reshape(3, 4))
        value, _ = mae(_flat(gt.altitudes + 7.5), gt, align_median=True)
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_grid_mismatch(self):
        with pytest.raises(DataMismatchError):
            mae(_flat(np.zeros((2, 2))), _flat(np.zeros((2, 2)), cell=0.5))
        with pytest.raises(DataMismatchError):
            mae(_flat(np.zeros((2, 2))), _flat(np.zeros((2, 3))))

    def test_no_shared_cells(self):
        with pytest.raises(DataMismatchError):
            mae(_flat([[NODATA, 1.0]]), _flat([[2.0, NODATA]]))

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(20, 5, (6, 7)), rng.normal(20, 5, (6, 7))
        a[0, :3] = NODATA
        b[4, 2:] = NODATA
        assert mae(_flat(a), _flat(b)) == mae(_flat(b), _flat(a))


# ── Images ──────────────────────────────────────────────────────────────

class TestPsnr:

    def test_identical_is_infinite(self):
        img = np.random.default_rng(0).random((4, 4, 3))
        assert psnr(img, img.copy()) == math.inf

    def test_uniform_offset(self):
        assert psnr(np.full((4, 4, 3), 0.6), np.full((4, 4, 3), 0.5)) == pytest.approx(20.0, rel=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((5, 6, 3)), rng.random((5, 6, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(DataMismatchError):
            psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


class TestShadingAccuracy:

    def test_perfect_agreement(self, bounds):
        lit = np.zeros((8, 8), dtype=bool)
        lit[:, :4] = True
        acc = shading_accuracy(PlaneField(0.5), None, bounds, _nadir_camera(), sun_vector(90.0, 60.0), lit)
        assert acc == 1.0

    def test_inverted_mask(self, bounds):
        lit = np.zeros((8, 8), dtype=bool)
        lit[:, 4:] = True
        acc = shading_accuracy(PlaneField(0.5), None, bounds, _nadir_camera(), sun_vector(90.0, 60.0), lit)
        assert acc == 0.0

    def test_nothing_visible(self, bounds, caplog):
        acc = shading_accuracy(PlaneField(-1.0), None, bounds, _nadir_camera(4), sun_vector(90.0, 60.0),
                               np.ones((4, 4), dtype=bool))
        assert acc == 0.0
        assert "no pixel" in caplog.text


class TestTransientResidue:

    def test_inside_mask_only(self):
        clean = np.zeros((4, 4, 3))
        rendered = clean.copy()
        rendered[0, 0] = 0.3
        rendered[3, 3] = 0.9  # outside the mask
        mask = np.zeros((4, 4), dtype=bool)
        mask[:2, :2] = True
        assert transient_residue(rendered, clean, mask) == pytest.approx(0.3 / 4)

    def test_empty_mask(self):
        assert transient_residue(np.ones((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((2, 2), dtype=bool)) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DataMismatchError):
            transient_residue(np.ones((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((3, 3), dtype=bool))
