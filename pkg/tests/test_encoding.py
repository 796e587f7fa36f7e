"""Hash-grid encoding and spherical-harmonic sun encoding.

Per level l with resolution N_l, x is scaled to x * N_l; the 8 corners of the
enclosing voxel are looked up (dense row-major index when (N_l + 1)^3 fits
the table, spatial hash otherwise) and blended with trilinear weights.
The SH oracle builds real harmonics from associated Legendre functions:
    Y_l^m = sqrt(2) K_l^|m| P_l^|m|(cos t) cos(m p)      m > 0
    Y_l^0 = K_l^0 P_l^0(cos t)
    Y_l^m = sqrt(2) K_l^|m| P_l^|m|(cos t) sin(|m| p)    m < 0
"""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from scipy.special import lpmv

from services.encoding import (HashGrid, HashGridConfig, ShConfig, encode_position, encode_sh, hash_index,
                               is_dense_level, level_resolution)
from services.errors import ConfigError


# ── Helpers ──────────────────────────────────────────────────────────────

def _small_cfg(table_size: int = 2 ** 12) -> HashGridConfig:
    return HashGridConfig(table_size=table_size, levels=2, features_per_level=2, coarsest_res=4, finest_res=8)


def _grid(cfg: HashGridConfig, seed: int = 0) -> HashGrid:
    grid = HashGrid(cfg, dtype=torch.float64)
    with torch.no_grad():
        grid.table.copy_(torch.randn(grid.table.shape, generator=torch.Generator().manual_seed(seed),
                                     dtype=torch.float64))
    return grid


def _trilinear(grid: HashGrid, level: int, base, frac) -> torch.Tensor:
    """Brute-force blend of the 8 corner features of voxel `base` at fractional offset `frac`."""
    out = torch.zeros(grid.cfg.features_per_level, dtype=torch.float64)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((frac[0] if dx else 1 - frac[0]) * (frac[1] if dy else 1 - frac[1])
                     * (frac[2] if dz else 1 - frac[2]))
                idx = hash_index((base[0] + dx, base[1] + dy, base[2] + dz), level, grid.cfg)
                out = out + w * grid.table[level, idx].detach()
    return out


def _real_sh(l: int, m: int, d: np.ndarray) -> float:
    x, y, z = d
    phi = math.atan2(y, x)
    k = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - abs(m)) / math.factorial(l + abs(m)))
    p = lpmv(abs(m), l, z)
    if m == 0:
        return k * p
    if m > 0:
        return math.sqrt(2) * k * p * math.cos(m * phi)
    return math.sqrt(2) * k * p * math.sin(-m * phi)


# ── Resolutions ─────────────────────────────────────────────────────────

class TestLevelResolution:

    def test_endpoints(self):
        cfg = HashGridConfig()
        assert level_resolution(0, cfg) == 16
        assert level_resolution(cfg.levels - 1, cfg) == 512

    def test_growth_formula(self):
        cfg = HashGridConfig()
        b = math.exp(math.log(32) / 7)
        assert cfg.growth == pytest.approx(b, rel=1e-15)
        assert level_resolution(3, cfg) == math.floor(16 * b ** 3)

    def test_non_decreasing(self):
        cfg = HashGridConfig(levels=16, coarsest_res=16, finest_res=2048)
        res = [level_resolution(l, cfg) for l in range(cfg.levels)]
        assert res == sorted(res)
        assert res[0] == 16 and res[-1] == 2048

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            level_resolution(8, HashGridConfig())

    def test_table_size_power_of_two(self):
        with pytest.raises(ConfigError) as info:
            HashGridConfig(table_size=1000)
        assert info.value.key == "hash.table_size"


# ── Hashing ─────────────────────────────────────────────────────────────

class TestHashIndex:

    def test_zero_vertex(self):
        cfg = HashGridConfig()
        for level in range(cfg.levels):
            assert hash_index((0, 0, 0), level, cfg) == 0

    def test_hand_computed_hash(self):
        cfg = HashGridConfig()
        assert not is_dense_level(7, cfg)
        expected = (1 ^ (2 * 2654435761) ^ (3 * 805459861)) % 2 ** 19
        assert hash_index((1, 2, 3), 7, cfg) == expected

    def test_dense_level_is_row_major(self):
        cfg = HashGridConfig()
        assert is_dense_level(0, cfg)
        assert hash_index((1, 2, 3), 0, cfg) == (1 * 17 + 2) * 17 + 3

    def test_bound_and_determinism(self):
        cfg = HashGridConfig(table_size=2 ** 10)
        rng = np.random.default_rng(0)
        for level in range(cfg.levels):
            res = level_resolution(level, cfg)
            c = torch.as_tensor(rng.integers(0, res + 1, size=(1000, 3)))
            idx = hash_index(c, level, cfg)
            assert int(idx.min()) >= 0 and int(idx.max()) < cfg.table_size
            assert torch.equal(idx, hash_index(c, level, cfg))

    def test_dense_levels_collision_free(self):
        cfg = _small_cfg()
        res = level_resolution(0, cfg)
        r = torch.arange(res + 1)
        c = torch.stack(torch.meshgrid(r, r, r, indexing="ij"), dim=-1).reshape(-1, 3)
        assert len(torch.unique(hash_index(c, 0, cfg))) == (res + 1) ** 3


# ── Position encoding ───────────────────────────────────────────────────

class TestEncodePosition:

    def test_default_output_length(self):
        grid = HashGrid(HashGridConfig(table_size=2 ** 10))
        assert encode_position(torch.rand(5, 3), grid).shape == (5, 16)

    def test_init_range(self):
        grid = HashGrid(_small_cfg())
        assert float(grid.table.abs().max()) <= 1e-4

    @pytest.mark.parametrize("table_size", [2 ** 12, 2 ** 6])
    def test_vertex_returns_stored_features(self, table_size):
        grid = _grid(_small_cfg(table_size))
        x = torch.tensor([[0.25, 0.5, 0.75]], dtype=torch.float64)
        out = encode_position(x, grid)[0]
        expected = []
        for level, scale in enumerate((4, 8)):
            c = tuple(int(round(v * scale)) for v in (0.25, 0.5, 0.75))
            expected.append(grid.table[level, hash_index(c, level, grid.cfg)].detach())
        torch.testing.assert_close(out.detach(), torch.cat(expected), rtol=0, atol=1e-15)

    def test_edge_midpoint_is_corner_mean(self):
        grid = _grid(_small_cfg())
        x = torch.tensor([[1.5 / 4, 0.5, 0.75]], dtype=torch.float64)
        out = encode_position(x, grid)[0, :2].detach()
        a = grid.table[0, hash_index((1, 2, 3), 0, grid.cfg)].detach()
        b = grid.table[0, hash_index((2, 2, 3), 0, grid.cfg)].detach()
        torch.testing.assert_close(out, (a + b) / 2, rtol=0, atol=1e-15)

    def test_random_points_match_brute_force(self):
        grid = _grid(_small_cfg(2 ** 6), seed=1)
        rng = np.random.default_rng(1)
        for x in rng.random((50, 3)):
            out = encode_position(torch.as_tensor(x)[None], grid)[0].detach()
            for level, res in enumerate(grid.resolutions()):
                pos = x * res
                base = np.minimum(np.floor(pos), res - 1).astype(int)
                expected = _trilinear(grid, level, base, pos - base)
                torch.testing.assert_close(out[2 * level:2 * level + 2], expected, rtol=0, atol=1e-12)

    def test_continuous_across_voxel_faces(self):
        grid = _grid(_small_cfg(), seed=2)
        x = np.array([0.5, 0.3, 0.6])  # x = 2/4 lies on a face at level 0
        out = encode_position(torch.as_tensor(x)[None], grid)[0, :2].detach()
        pos = x * 4
        lower = np.array([1, int(pos[1]), int(pos[2])])
        from_lower = _trilinear(grid, 0, lower, pos - lower)
        torch.testing.assert_close(out, from_lower, rtol=0, atol=1e-12)

    def test_gradient_equals_trilinear_weights(self):
        grid = _grid(_small_cfg())
        x = torch.tensor([[0.31, 0.62, 0.17]], dtype=torch.float64)
        encode_position(x, grid)[0, 0].backward()
        pos = x[0].numpy() * 4
        base = np.floor(pos).astype(int)
        frac = pos - base
        grad = grid.table.grad[0, :, 0]
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = ((frac[0] if dx else 1 - frac[0]) * (frac[1] if dy else 1 - frac[1])
                         * (frac[2] if dz else 1 - frac[2]))
                    idx = hash_index((base[0] + dx, base[1] + dy, base[2] + dz), 0, grid.cfg)
                    assert float(grad[idx]) == pytest.approx(w, rel=1e-6)
        assert int((grad != 0).sum()) == 8

    def test_out_of_cube_clamped_with_warning(self, caplog):
        grid = _grid(_small_cfg())
        inside = encode_position(torch.tensor([[1.0, 0.5, 0.0]], dtype=torch.float64), grid)
        outside = encode_position(torch.tensor([[1.2, 0.5, -0.3]], dtype=torch.float64), grid)
        torch.testing.assert_close(outside, inside)
        assert "clamped" in caplog.text


# ── Spherical harmonics ─────────────────────────────────────────────────

class TestEncodeSh:

    def test_constant_term(self):
        d = torch.nn.functional.normalize(torch.randn(20, 3, dtype=torch.float64), dim=-1)
        out = encode_sh(d, ShConfig(4))
        assert out.shape == (20, 16)
        torch.testing.assert_close(out[:, 0], torch.full((20,), 0.28209479177387814, dtype=torch.float64))

    def test_degree_one_is_constant(self):
        d = torch.nn.functional.normalize(torch.randn(7, 3, dtype=torch.float64), dim=-1)
        out = encode_sh(d, ShConfig(1))
        assert out.shape == (7, 1)
        assert torch.all(out == 0.28209479177387814)

    def test_axis_direction_keeps_only_zonal_terms(self):
        out = encode_sh(torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64), ShConfig(5))
        zonal = {l * l + l for l in range(5)}
        for i, v in enumerate(out.tolist()):
            if i not in zonal:
                assert v == pytest.approx(0.0, abs=1e-15)
        assert out[2] == pytest.approx(0.4886025119029199)

    def test_matches_legendre_oracle(self):
        rng = np.random.default_rng(0)
        for d in rng.normal(size=(100, 3)):
            d /= np.linalg.norm(d)
            out = encode_sh(torch.as_tensor(d), ShConfig(5)).numpy()
            expected = [_real_sh(l, m, d) for l in range(5) for m in range(-l, l + 1)]
            np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-12)

    def test_non_unit_normalized(self, caplog):
        d = torch.tensor([0.0, 3.0, 4.0], dtype=torch.float64)
        torch.testing.assert_close(encode_sh(d, ShConfig(3)), encode_sh(d / 5.0, ShConfig(3)))
        assert "renormalized" in caplog.text

    def test_degree_range(self):
        with pytest.raises(ConfigError):
            ShConfig(degree=6)
