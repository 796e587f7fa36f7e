"""
Binary checkpoints.

    b"SATNGP01"
    repeated: tag (4 ASCII bytes) | payload length (uint64 LE) | payload

CONF canonical compact JSON (run config, bounds, step, epoch, grid update count),
HASH the hash table and MLP_ every other parameter in sorted-name order, both
float32 LE; GRID the occupancy density cache as float32 LE; OPTM (optional)
exp_avg / exp_avg_sq per parameter in the same order as HASH + MLP_.
"""
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from services.errors import CheckpointError
from services.field import SatNgpField
from services.geometry import SceneBounds
from services.run_config import RunConfig
from services.sampler import OccupancyGrid

log = logging.getLogger(__name__)

MAGIC = b"SATNGP01"
SECTION_TAGS = (b"CONF", b"HASH", b"MLP_", b"GRID", b"OPTM")
_LEN = struct.Struct("<Q")


@dataclass
class Checkpoint:
    config: RunConfig
    bounds: SceneBounds
    model: SatNgpField
    grid: OccupancyGrid
    step: int = 0
    epoch: int = 0
    optimizer_state: Optional[Dict[str, Any]] = None  # {"step": int, "moments": [(exp_avg, exp_avg_sq), ...]}


def _f32(t: torch.Tensor) -> bytes:
    return t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()


def _mlp_params(model: SatNgpField) -> List[Tuple[str, torch.nn.Parameter]]:
    return sorted((n, p) for n, p in model.named_parameters() if n != "encoding.table")


def _ordered_params(model: SatNgpField) -> List[torch.nn.Parameter]:
    return [model.encoding.table] + [p for _, p in _mlp_params(model)]


def save_checkpoint(path: Union[str, Path], config: RunConfig, bounds: SceneBounds, model: SatNgpField,
                    grid: OccupancyGrid, step: int = 0, epoch: int = 0,
                    optimizer: Optional[torch.optim.Optimizer] = None) -> Path:
    path = Path(path)
    conf = {
        "run": config.to_dict(),
        "bounds": bounds.to_dict(),
        "step": int(step),
        "epoch": int(epoch),
        "grid_updates": int(grid.update_count),
        "optimizer_step": None,
    }
    sections = []
    optm = None
    if optimizer is not None:
        chunks, opt_step = [], 0
        for p in _ordered_params(model):
            st = optimizer.state.get(p, {})
            opt_step = max(opt_step, int(st.get("step", 0)))
            chunks.append(_f32(st.get("exp_avg", torch.zeros_like(p))))
            chunks.append(_f32(st.get("exp_avg_sq", torch.zeros_like(p))))
        conf["optimizer_step"] = opt_step
        optm = b"".join(chunks)

    sections.append((b"CONF", json.dumps(conf, sort_keys=True, separators=(",", ":")).encode("utf-8")))
    sections.append((b"HASH", _f32(model.encoding.table)))
    sections.append((b"MLP_", b"".join(_f32(p) for _, p in _mlp_params(model))))
    sections.append((b"GRID", _f32(grid.density_cache)))
    if optm is not None:
        sections.append((b"OPTM", optm))

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        for tag, payload in sections:
            f.write(tag)
            f.write(_LEN.pack(len(payload)))
            f.write(payload)
    tmp.replace(path)
    log.debug("checkpoint step %d written to %s", step, path)
    return path


def read_sections(path: Union[str, Path]) -> Dict[bytes, bytes]:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a SAT-NGP checkpoint (bad magic)")
    pos, sections = len(MAGIC), {}
    while pos < len(data):
        if pos + 12 > len(data):
            raise CheckpointError(f"{path}: truncated section header at byte {pos}")
        tag = data[pos:pos + 4]
        (length,) = _LEN.unpack_from(data, pos + 4)
        pos += 12
        if tag not in SECTION_TAGS:
            raise CheckpointError(f"{path}: unknown section {tag!r}")
        if pos + length > len(data):
            raise CheckpointError(f"{path}: section {tag.decode()} truncated")
        sections[tag] = data[pos:pos + length]
        pos += length
    missing = [t.decode() for t in SECTION_TAGS[:4] if t not in sections]
    if missing:
        raise CheckpointError(f"{path}: missing sections {missing}")
    return sections


def _take(buf: np.ndarray, offset: int, like: torch.Tensor) -> Tuple[torch.Tensor, int]:
    n = like.numel()
    if offset + n > buf.size:
        raise CheckpointError("parameter payload shorter than the configured model")
    t = torch.from_numpy(buf[offset:offset + n].astype(np.float64)).reshape(like.shape).to(like.dtype)
    return t, offset + n


def load_checkpoint(path: Union[str, Path], dtype: Optional[torch.dtype] = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    sections = read_sections(path)
    conf: Dict[str, Any] = json.loads(sections[b"CONF"].decode("utf-8"))
    cfg = RunConfig.from_dict(conf["run"])
    bounds = SceneBounds.from_dict(conf["bounds"])
    model = SatNgpField(cfg.hash, cfg.sh, cfg.field, dtype=dtype)

    with torch.no_grad():
        table = np.frombuffer(sections[b"HASH"], dtype="<f4")
        t, used = _take(table, 0, model.encoding.table)
        if used != table.size:
            raise CheckpointError(f"{path}: hash table size does not match the stored config")
        model.encoding.table.copy_(t)
        mlp = np.frombuffer(sections[b"MLP_"], dtype="<f4")
        offset = 0
        for _, p in _mlp_params(model):
            t, offset = _take(mlp, offset, p)
            p.copy_(t)
        if offset != mlp.size:
            raise CheckpointError(f"{path}: MLP payload does not match the stored config")

    grid = OccupancyGrid(cfg.grid)
    cache = np.frombuffer(sections[b"GRID"], dtype="<f4")
    if cache.size != cfg.grid.resolution ** 3:
        raise CheckpointError(f"{path}: occupancy grid size does not match the stored config")
    grid.load_cache(torch.from_numpy(cache.astype(np.float64)))
    grid.update_count = int(conf.get("grid_updates", 0))

    optimizer_state = None
    if b"OPTM" in sections:
        buf = np.frombuffer(sections[b"OPTM"], dtype="<f4")
        offset, moments = 0, []
        for p in _ordered_params(model):
            m, offset = _take(buf, offset, p)
            v, offset = _take(buf, offset, p)
            moments.append((m, v))
        optimizer_state = {"step": conf.get("optimizer_step") or 0, "moments": moments}
    return Checkpoint(cfg, bounds, model, grid, int(conf.get("step", 0)), int(conf.get("epoch", 0)),
                      optimizer_state)


def restore_optimizer(optimizer: torch.optim.Optimizer, checkpoint: Checkpoint) -> None:
    """Load stored RAdam moments into an optimizer built over checkpoint.model."""
    if checkpoint.optimizer_state is None:
        return
    step = int(checkpoint.optimizer_state["step"])
    for p, (m, v) in zip(_ordered_params(checkpoint.model), checkpoint.optimizer_state["moments"]):
        optimizer.state[p] = {"step": step, "exp_avg": m.clone(), "exp_avg_sq": v.clone()}
