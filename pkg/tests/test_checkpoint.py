"""Checkpoint container: magic header, tagged sections and float32 payloads."""

from __future__ import annotations

import struct

import pytest
import torch

from services.checkpoint import MAGIC, load_checkpoint, read_sections, restore_optimizer, save_checkpoint
from services.errors import CheckpointError
from services.field import SatNgpField
from services.optim import make_optimizer
from services.sampler import OccupancyGrid

from conftest import tiny_run_config


# ── Helpers ──────────────────────────────────────────────────────────────

def _state(seed: int = 0):
    cfg = tiny_run_config(**{"field.seed": seed})
    model = SatNgpField(cfg.hash, cfg.sh, cfg.field, dtype=torch.float64)
    with torch.no_grad():
        model.encoding.table.normal_(generator=torch.Generator().manual_seed(seed))
    grid = OccupancyGrid(cfg.grid)
    grid.load_cache(torch.rand(cfg.grid.resolution ** 3, generator=torch.Generator().manual_seed(seed + 1),
                               dtype=torch.float64))
    grid.update_count = 7
    return cfg, model, grid


def _f32(t: torch.Tensor) -> torch.Tensor:
    return t.detach().to(torch.float32)


# ── Round trip ──────────────────────────────────────────────────────────

class TestCheckpoint:

    def test_round_trip(self, tmp_path, bounds):
        cfg, model, grid = _state()
        path = save_checkpoint(tmp_path / "m.satngp", cfg, bounds, model, grid, step=12, epoch=2)
        ck = load_checkpoint(path, dtype=torch.float64)
        assert ck.config == cfg and ck.bounds == bounds
        assert (ck.step, ck.epoch, ck.grid.update_count) == (12, 2, 7)
        for (name, a), (_, b) in zip(model.named_parameters(), ck.model.named_parameters()):
            assert torch.equal(_f32(a), _f32(b)), name
        assert torch.equal(_f32(grid.density_cache), _f32(ck.grid.density_cache))
        assert ck.optimizer_state is None

    def test_loaded_model_renders_the_same_field(self, tmp_path, bounds):
        cfg, model, grid = _state(3)
        ck = load_checkpoint(save_checkpoint(tmp_path / "m.satngp", cfg, bounds, model, grid), torch.float64)
        x = torch.rand(32, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        torch.testing.assert_close(ck.model.density(x), model.density(x), rtol=1e-5, atol=1e-6)

    def test_layout(self, tmp_path, bounds):
        cfg, model, grid = _state()
        path = save_checkpoint(tmp_path / "m.satngp", cfg, bounds, model, grid)
        data = path.read_bytes()
        assert data[:8] == MAGIC
        assert data[8:12] == b"CONF"
        sections = read_sections(path)
        assert list(sections) == [b"CONF", b"HASH", b"MLP_", b"GRID"]
        assert len(sections[b"HASH"]) == 4 * model.encoding.table.numel()
        assert len(sections[b"GRID"]) == 4 * cfg.grid.resolution ** 3
        assert not (tmp_path / "m.satngp.tmp").exists()

    def test_optimizer_moments(self, tmp_path, bounds):
        cfg, model, grid = _state()
        opt = make_optimizer(model, lr=0.01)
        x = torch.rand(16, 3, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        for _ in range(3):
            opt.zero_grad()
            model.density(x).sum().backward()
            opt.step()
        path = save_checkpoint(tmp_path / "m.satngp", cfg, bounds, model, grid, optimizer=opt)
        assert b"OPTM" in read_sections(path)

        ck = load_checkpoint(path, torch.float64)
        assert ck.optimizer_state["step"] == 3
        fresh = make_optimizer(ck.model, lr=0.01)
        restore_optimizer(fresh, ck)
        stored = opt.state[model.trunk[0].weight]
        restored = fresh.state[ck.model.trunk[0].weight]
        assert restored["step"] == 3
        assert torch.equal(_f32(restored["exp_avg"]), _f32(stored["exp_avg"]))
        assert torch.equal(_f32(restored["exp_avg_sq"]), _f32(stored["exp_avg_sq"]))


# ── Corruption ──────────────────────────────────────────────────────────

class TestCheckpointErrors:

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "none.satngp")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.satngp"
        path.write_bytes(b"NOTNGP01" + b"\x00" * 32)
        with pytest.raises(CheckpointError):
            read_sections(path)

    def test_truncated(self, tmp_path, bounds):
        cfg, model, grid = _state()
        path = save_checkpoint(tmp_path / "m.satngp", cfg, bounds, model, grid)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_unknown_section(self, tmp_path, bounds):
        cfg, model, grid = _state()
        path = save_checkpoint(tmp_path / "m.satngp", cfg, bounds, model, grid)
        path.write_bytes(path.read_bytes() + b"XTRA" + struct.pack("<Q", 0))
        with pytest.raises(CheckpointError) as info:
            read_sections(path)
        assert "XTRA" in str(info.value)

    def test_table_size_must_match_config(self, tmp_path, bounds):
        cfg, model, grid = _state()
        path = save_checkpoint(tmp_path / "m.satngp", cfg, bounds, model, grid)
        data = bytearray(path.read_bytes())
        conf_len = struct.unpack_from("<Q", data, 12)[0]
        conf = bytes(data[20:20 + conf_len]).replace(b'"levels":3', b'"levels":2')
        assert len(conf) == conf_len
        data[20:20 + conf_len] = conf
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
