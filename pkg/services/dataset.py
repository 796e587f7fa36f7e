"""
Scene manifests, image I/O and the in-memory ray cache used for training.

Manifest layout (JSON, paths relative to the manifest directory):

    {"bounds": {"utm_min": [e, n, z], "utm_max": [e, n, z], "utm_zone": 17, "hemisphere": "N"},
     "images": [{"img": "images/view_000.png", "width": 96, "height": 96,
                 "rpc": {...} | "camera": {"type": "affine", ...},
                 "sun_azimuth": 140.0, "sun_elevation": 60.0, "acquisition_date": "...",
                 "split": "train", "shadow_mask": "...", "transient_mask": "...", "clean_img": "..."}],
     "gt_dsm": "dsm.asc", "holdout": [3, 7]}
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from PIL import Image

from services.errors import DatasetError, DomainError
from services.geometry import (Camera, RayBatch, SceneBounds, SunDirection, camera_from_record, camera_to_record,
                               pixel_grid, rays_from_pixels, sun_vector)

log = logging.getLogger(__name__)

SPLITS = ("train", "test")
REQUIRED_KEYS = ("img", "width", "height", "sun_azimuth", "sun_elevation")


# -------------------------- Images --------------------------

def read_image(path: Union[str, Path], height: Optional[int] = None, width: Optional[int] = None) -> np.ndarray:
    """(H, W, 3) float64 in [0, 1]; .f32 files are raw little-endian planar 3 x H x W."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    if path.suffix.lower() == ".f32":
        if height is None or width is None:
            raise DatasetError("raw float32 images need explicit height and width", str(path))
        raw = np.fromfile(path, dtype="<f4")
        if raw.size != 3 * height * width:
            raise DatasetError(f"expected {3 * height * width} floats, found {raw.size}", str(path))
        return raw.reshape(3, height, width).transpose(1, 2, 0).astype(np.float64)
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return rgb


def write_image(path: Union[str, Path], rgb: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    if path.suffix.lower() == ".f32":
        rgb.transpose(2, 0, 1).astype("<f4").tofile(path)
    else:
        Image.fromarray(np.round(rgb * 255.0).astype(np.uint8)).save(path, format="PNG")
    return path


def read_mask(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_mask(path: Union[str, Path], mask: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, format="PNG")
    return path


# -------------------------- Manifest --------------------------

@dataclass
class ImageRecord:
    name: str
    img: Path
    width: int
    height: int
    camera: Camera
    sun_azimuth: float
    sun_elevation: float
    acquisition_date: str = ""
    split: str = "train"
    shadow_mask: Optional[Path] = None
    transient_mask: Optional[Path] = None
    clean_img: Optional[Path] = None

    @property
    def sun(self) -> SunDirection:
        return sun_vector(self.sun_azimuth, self.sun_elevation)

    @classmethod
    def from_dict(cls, d: Dict[str, Any], root: Path, index: int) -> "ImageRecord":
        name = Path(str(d.get("img", f"record {index}"))).stem or f"record {index}"
        missing = [k for k in REQUIRED_KEYS if k not in d]
        if missing:
            raise DatasetError(f"missing keys {missing}", name)
        try:
            camera = camera_from_record(d)
        except DatasetError as e:
            raise DatasetError(str(e), name)
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"malformed camera block: {e}", name)
        split = d.get("split", "train")
        if split not in SPLITS:
            raise DatasetError(f"split must be one of {SPLITS}, got {split!r}", name)

        def optional(key: str) -> Optional[Path]:
            return root / d[key] if d.get(key) else None

        return cls(
            name=name, img=root / d["img"], width=int(d["width"]), height=int(d["height"]), camera=camera,
            sun_azimuth=float(d["sun_azimuth"]), sun_elevation=float(d["sun_elevation"]),
            acquisition_date=str(d.get("acquisition_date", "")), split=split,
            shadow_mask=optional("shadow_mask"), transient_mask=optional("transient_mask"),
            clean_img=optional("clean_img"),
        )

    def to_dict(self, root: Path) -> Dict[str, Any]:
        d: Dict[str, Any] = {
            "img": self.img.relative_to(root).as_posix(),
            "width": self.width,
            "height": self.height,
            "sun_azimuth": self.sun_azimuth,
            "sun_elevation": self.sun_elevation,
            "acquisition_date": self.acquisition_date,
            "split": self.split,
            **camera_to_record(self.camera),
        }
        for key in ("shadow_mask", "transient_mask", "clean_img"):
            value = getattr(self, key)
            if value is not None:
                d[key] = value.relative_to(root).as_posix()
        return d


@dataclass
class DatasetManifest:
    root: Path
    bounds: SceneBounds
    images: List[ImageRecord]
    gt_dsm: Optional[Path] = None
    holdout: List[int] = field(default_factory=list)

    def is_test(self, index: int) -> bool:
        return index in self.holdout or self.images[index].split == "test"

    @property
    def train_views(self) -> List[int]:
        return [i for i in range(len(self.images)) if not self.is_test(i)]

    @property
    def test_views(self) -> List[int]:
        return [i for i in range(len(self.images)) if self.is_test(i)]

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {
            "bounds": self.bounds.to_dict(),
            "images": [r.to_dict(self.root) for r in self.images],
            "holdout": list(self.holdout),
        }
        if self.gt_dsm is not None:
            d["gt_dsm"] = self.gt_dsm.relative_to(self.root).as_posix()
        return d


def read_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}", str(path))
    if not isinstance(data, dict) or "bounds" not in data or "images" not in data:
        raise DatasetError("manifest needs 'bounds' and 'images'", str(path))
    root = path.parent
    try:
        bounds = SceneBounds.from_dict(data["bounds"])
    except (KeyError, TypeError, ValueError, DomainError) as e:
        raise DatasetError(f"malformed bounds: {e}", str(path))
    images = [ImageRecord.from_dict(r, root, i) for i, r in enumerate(data["images"])]
    holdout = [int(i) for i in data.get("holdout", [])]
    bad = [i for i in holdout if not 0 <= i < len(images)]
    if bad:
        raise DatasetError(f"holdout indices {bad} out of range", str(path))
    gt = root / data["gt_dsm"] if data.get("gt_dsm") else None
    return DatasetManifest(root, bounds, images, gt, holdout)


def write_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n")
    return path


# -------------------------- Ray cache --------------------------

@dataclass
class SceneDataset:
    """Every pixel of every view as a ray, views concatenated in manifest order, pixels row-major."""
    manifest: DatasetManifest
    rays: RayBatch
    rgb: np.ndarray         # (N, 3)
    sun_dirs: np.ndarray    # (N, 3) metric light directions
    view_index: np.ndarray  # (N,)
    offsets: np.ndarray     # (V + 1,)
    report: Dict[str, Any] = field(default_factory=dict)

    @property
    def bounds(self) -> SceneBounds:
        return self.manifest.bounds

    def __len__(self) -> int:
        return len(self.rays)

    def view_slice(self, v: int) -> slice:
        return slice(int(self.offsets[v]), int(self.offsets[v + 1]))

    def view_rays(self, v: int) -> RayBatch:
        s = self.view_slice(v)
        r = self.rays
        return RayBatch(r.origins[s], r.directions[s], r.t_near[s], r.t_far[s], r.hit[s])

    def view_image(self, v: int) -> np.ndarray:
        rec = self.manifest.images[v]
        return self.rgb[self.view_slice(v)].reshape(rec.height, rec.width, 3)

    def train_ray_ids(self) -> np.ndarray:
        """Indices of cube-hitting rays of training views."""
        train = np.isin(self.view_index, self.manifest.train_views)
        return np.flatnonzero(train & self.rays.hit)


def _load_view(record: ImageRecord, bounds: SceneBounds):
    try:
        rgb = read_image(record.img, record.height, record.width)
    except FileNotFoundError:
        raise DatasetError(f"image file missing: {record.img}", record.name)
    if rgb.shape[:2] != (record.height, record.width):
        raise DatasetError(f"image is {rgb.shape[1]}x{rgb.shape[0]}, manifest says "
                           f"{record.width}x{record.height}", record.name)
    rows, cols = pixel_grid(record.height, record.width)
    rays = rays_from_pixels(rows, cols, record.camera, bounds)
    return rgb.reshape(-1, 3), rays


def load_dataset(path: Union[str, Path], threads: Optional[int] = None) -> SceneDataset:
    manifest = read_manifest(path)
    if len(manifest.train_views) < 2:
        raise DatasetError(f"need at least 2 training images, found {len(manifest.train_views)}", str(path))

    with ThreadPoolExecutor(max_workers=threads) as pool:
        loaded = list(pool.map(lambda r: _load_view(r, manifest.bounds), manifest.images))

    counts = [len(rays) for _, rays in loaded]
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    rays = RayBatch(
        np.concatenate([r.origins for _, r in loaded]),
        np.concatenate([r.directions for _, r in loaded]),
        np.concatenate([r.t_near for _, r in loaded]),
        np.concatenate([r.t_far for _, r in loaded]),
        np.concatenate([r.hit for _, r in loaded]),
    )
    norms = np.linalg.norm(rays.directions, axis=-1)
    assert np.all(np.abs(norms - 1.0) <= 1e-9), "generated ray direction is not a unit vector"

    sun_dirs = np.concatenate([np.broadcast_to(rec.sun.vector, (n, 3)) for rec, n in zip(manifest.images, counts)])
    view_index = np.repeat(np.arange(len(counts)), counts)
    hits = [int(r.hit.sum()) for _, r in loaded]
    report = {
        "views": len(manifest.images),
        "train_views": len(manifest.train_views),
        "test_views": len(manifest.test_views),
        "rays": int(offsets[-1]),
        "rays_in_bounds": int(sum(hits)),
        "coverage": float(sum(hits)) / max(1, int(offsets[-1])),
        "per_view": {rec.name: {"rays": n, "in_bounds": h} for rec, n, h in zip(manifest.images, counts, hits)},
    }
    for rec, n, h in zip(manifest.images, counts, hits):
        if h == 0:
            raise DatasetError("no rays intersect the scene bounds", rec.name)
        if h < n:
            log.warning("%s: %d of %d rays miss the scene bounds", rec.name, n - h, n)
    log.info("loaded %d views (%d train / %d test), %d rays, %.1f%% inside bounds",
             report["views"], report["train_views"], report["test_views"], report["rays"],
             100.0 * report["coverage"])
    return SceneDataset(manifest, rays, np.concatenate([rgb for rgb, _ in loaded]), sun_dirs, view_index,
                        offsets, report)
