"""Shared fixtures: RPC models, scene bounds, tiny double-precision fields and a tiny synthetic scene."""

from __future__ import annotations

import numpy as np
import pytest
import torch

import services
from services.encoding import HashGridConfig, ShConfig
from services.field import FieldConfig, SatNgpField
from services.geometry import RpcModel, SceneBounds, lonlat_to_utm
from services.run_config import RunConfig, apply_overrides
from services.synthetic import SyntheticSceneSpec, generate_synthetic

LAT0, LON0, ALT0 = 30.3, -81.7, 20.0
UTM_ZONE = 17


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run end-to-end training acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def debug_checks(monkeypatch):
    monkeypatch.setattr(services, "DEBUG_CHECKS", True)


@pytest.fixture
def double():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield torch.float64
    torch.set_default_dtype(previous)


# ── RPC models ──────────────────────────────────────────────────────────

def rpc_scalars(**overrides) -> dict:
    d = dict(lat_offset=LAT0, lat_scale=0.01, lon_offset=LON0, lon_scale=0.01, alt_offset=ALT0, alt_scale=50.0,
             row_offset=500.0, row_scale=500.0, col_offset=500.0, col_scale=500.0)
    d.update(overrides)
    return d


def unit(k: int) -> np.ndarray:
    v = np.zeros(20)
    v[k] = 1.0
    return v


def linear_rpc() -> RpcModel:
    """row driven by latitude only, col by longitude only; a nadir sensor."""
    return RpcModel(row_num=unit(1), row_den=unit(0), col_num=unit(2), col_den=unit(0), **rpc_scalars())


def mild_rpc(seed: int = 0) -> RpcModel:
    """Near-affine RPC with an oblique altitude term and tiny higher-order coefficients."""
    rng = np.random.default_rng(seed)
    row_num = 1e-5 * rng.normal(size=20)
    col_num = 1e-5 * rng.normal(size=20)
    row_num[:4] = [0.0, 1.0, 0.1, 0.05]
    col_num[:4] = [0.0, 0.1, 1.0, -0.04]
    row_den = 1e-5 * rng.normal(size=20)
    col_den = 1e-5 * rng.normal(size=20)
    row_den[0] = col_den[0] = 1.0
    return RpcModel(row_num=row_num, row_den=row_den, col_num=col_num, col_den=col_den, **rpc_scalars())


def random_rpc(rng: np.random.Generator) -> RpcModel:
    """Arbitrary cubic numerators with well-conditioned denominators."""
    row_den = 0.05 * rng.normal(size=20)
    col_den = 0.05 * rng.normal(size=20)
    row_den[0] = col_den[0] = 1.0
    return RpcModel(row_num=rng.normal(size=20), row_den=row_den, col_num=rng.normal(size=20), col_den=col_den,
                    **rpc_scalars(row_offset=float(rng.uniform(100, 900)), col_scale=float(rng.uniform(100, 900))))


def rpc_bounds(half_width: float = 600.0) -> SceneBounds:
    probe = SceneBounds((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), UTM_ZONE)
    e, n = lonlat_to_utm(LON0, LAT0, probe)
    e, n = float(e), float(n)
    return SceneBounds((e - half_width, n - half_width, ALT0 - 50.0),
                       (e + half_width, n + half_width, ALT0 + 50.0), UTM_ZONE)


@pytest.fixture
def bounds() -> SceneBounds:
    return SceneBounds((435000.0, 3354000.0, 5.0), (435128.0, 3354128.0, 75.0), UTM_ZONE)


# ── Models and configs ──────────────────────────────────────────────────

def tiny_configs(levels: int = 2, table_size: int = 2 ** 8, width: int = 4, degree: int = 2, seed: int = 0):
    return (HashGridConfig(table_size=table_size, levels=levels, features_per_level=2, coarsest_res=4, finest_res=8),
            ShConfig(degree=degree),
            FieldConfig(hidden_width=width, hidden_layers=2, shading_width=width, head_gain=0.5, seed=seed))


def tiny_field(dtype: torch.dtype = torch.float64, seed: int = 0, **kwargs) -> SatNgpField:
    hash_cfg, sh_cfg, field_cfg = tiny_configs(seed=seed, **kwargs)
    model = SatNgpField(hash_cfg, sh_cfg, field_cfg, dtype=dtype)
    # spread the table so gradients through the trunk are not vanishingly small
    with torch.no_grad():
        g = torch.Generator().manual_seed(seed + 7)
        model.encoding.table.copy_(torch.randn(model.encoding.table.shape, generator=g, dtype=dtype))
    return model


@pytest.fixture
def model(double) -> SatNgpField:
    return tiny_field()


def tiny_run_config(**overrides) -> RunConfig:
    base = {
        "hash": {"table_size": 2 ** 10, "levels": 3, "coarsest_res": 4, "finest_res": 16},
        "sh": {"degree": 2},
        "field": {"hidden_width": 16, "shading_width": 16},
        "grid": {"resolution": 16, "warmup_steps": 2, "update_interval": 2, "max_samples": 32,
                 "min_samples": 4, "chunk": 4096},
        "train": {"batch_rays": 64, "epochs": 1, "steps_per_epoch": 3, "solar_rays": 8, "solar_samples": 8,
                  "robust_warmup_steps": 2, "render_chunk": 1024, "log_every": 1},
    }
    cfg = apply_overrides(RunConfig(), base)
    return apply_overrides(cfg, overrides) if overrides else cfg


# ── Synthetic scene ─────────────────────────────────────────────────────

def tiny_scene_spec(**overrides) -> SyntheticSceneSpec:
    d = dict(heightfield_res=32, ground_extent=64.0, altitude_range=20.0, noise_cells=3, buildings=1, views=4,
             holdout=1, image_size=16, transients=2, transient_size=4, corrupted_fraction=0.5, seed=3)
    d.update(overrides)
    return SyntheticSceneSpec(**d)


@pytest.fixture(scope="session")
def tiny_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    manifest = generate_synthetic(tiny_scene_spec(), out)
    return out / "manifest.json", manifest
