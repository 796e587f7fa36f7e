"""
Scene frame and sensor geometry for SAT-NGP.

Everything the field sees lives in the normalized scene cube [0,1]^3, an
affine image of a UTM box whose z axis is the altitude. Cameras (RPC sensor
models or the affine cameras used by synthetic scenes) only have to localize
a pixel at a given altitude; rays are built from two such localizations.
"""
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from pyproj import CRS, Transformer

from services.errors import DatasetError, DomainError, LocalizationError, SingularModelError

log = logging.getLogger(__name__)

NORMALIZATION_MARGIN = 0.01
RPC_DOMAIN_LIMIT = 1.5
RPC_DENOMINATOR_EPS = 1e-12
LOCALIZE_MAX_ITER = 20
LOCALIZE_TOL_PX = 1e-3
LOCALIZE_STEP_CLAMP = 0.5

RPC_SCALAR_KEYS = ("lat_offset", "lat_scale", "lon_offset", "lon_scale", "alt_offset", "alt_scale",
                   "row_offset", "row_scale", "col_offset", "col_scale")


def _as_output(a: np.ndarray):
    return float(a) if np.ndim(a) == 0 else a


# -------------------------- Scene frame --------------------------

@dataclass(frozen=True)
class SceneBounds:
    utm_min: Tuple[float, float, float]
    utm_max: Tuple[float, float, float]
    utm_zone: int
    hemisphere: str = "N"

    def __post_init__(self):
        lo = np.asarray(self.utm_min, dtype=np.float64)
        hi = np.asarray(self.utm_max, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise DomainError("scene bounds need 3 components per corner")
        if not np.all(lo < hi):
            raise DomainError(f"scene bounds are empty along some axis: {tuple(lo)} / {tuple(hi)}")
        if self.hemisphere not in ("N", "S"):
            raise DomainError(f"hemisphere must be 'N' or 'S', got {self.hemisphere!r}")
        object.__setattr__(self, "utm_min", tuple(float(v) for v in lo))
        object.__setattr__(self, "utm_max", tuple(float(v) for v in hi))
        object.__setattr__(self, "utm_zone", int(self.utm_zone))

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.utm_min, dtype=np.float64)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.utm_max, dtype=np.float64)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def altitude_range(self) -> Tuple[float, float]:
        return self.utm_min[2], self.utm_max[2]

    @property
    def epsg(self) -> int:
        return (32600 if self.hemisphere == "N" else 32700) + self.utm_zone

    def to_dict(self) -> Dict[str, Any]:
        return {
            "utm_min": list(self.utm_min),
            "utm_max": list(self.utm_max),
            "utm_zone": self.utm_zone,
            "hemisphere": self.hemisphere,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "SceneBounds":
        return cls(tuple(d["utm_min"]), tuple(d["utm_max"]), int(d["utm_zone"]), d.get("hemisphere", "N"))


def normalize_point(p_utm, b: SceneBounds, check: bool = True):
    """Map UTM points (..., 3) to the unit cube; raises DomainError beyond the 1% margin."""
    p = np.asarray(p_utm, dtype=np.float64)
    q = (p - b.lo) / b.extent
    if check and (np.any(q < -NORMALIZATION_MARGIN) or np.any(q > 1.0 + NORMALIZATION_MARGIN)):
        raise DomainError(f"point outside scene bounds (+{NORMALIZATION_MARGIN:.0%} margin)")
    return q


def denormalize_point(q, b: SceneBounds):
    return np.asarray(q, dtype=np.float64) * b.extent + b.lo


def normalize_direction(v, b: SceneBounds) -> np.ndarray:
    """Metric (east/north/up) direction -> unit direction in the normalized frame."""
    d = np.asarray(v, dtype=np.float64) / b.extent
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


@lru_cache(maxsize=16)
def _lonlat_to_utm(epsg: int) -> Transformer:
    return Transformer.from_crs(CRS.from_epsg(4326), CRS.from_epsg(epsg), always_xy=True)


@lru_cache(maxsize=16)
def _utm_to_lonlat(epsg: int) -> Transformer:
    return Transformer.from_crs(CRS.from_epsg(epsg), CRS.from_epsg(4326), always_xy=True)


def lonlat_to_utm(lon, lat, b: SceneBounds) -> Tuple[np.ndarray, np.ndarray]:
    e, n = _lonlat_to_utm(b.epsg).transform(np.asarray(lon, dtype=np.float64), np.asarray(lat, dtype=np.float64))
    return np.asarray(e), np.asarray(n)


def utm_to_lonlat(easting, northing, b: SceneBounds) -> Tuple[np.ndarray, np.ndarray]:
    lon, lat = _utm_to_lonlat(b.epsg).transform(
        np.asarray(easting, dtype=np.float64), np.asarray(northing, dtype=np.float64))
    return np.asarray(lon), np.asarray(lat)


# -------------------------- RPC sensor model --------------------------

# Term order (L=lat, P=lon, H=alt, all normalized):
# 1, L, P, H, LP, LH, PH, L2, P2, H2, PLH, L3, LP2, LH2, L2P, P3, PH2, L2H, P2H, H3
def rpc_monomials(L, P, H) -> np.ndarray:
    one = np.ones_like(L)
    return np.stack([
        one, L, P, H,
        L * P, L * H, P * H,
        L * L, P * P, H * H,
        P * L * H,
        L * L * L, L * P * P, L * H * H, L * L * P,
        P * P * P, P * H * H, L * L * H, P * P * H,
        H * H * H,
    ])


def _rpc_monomial_partials(L, P, H) -> Tuple[np.ndarray, np.ndarray]:
    zero, one = np.zeros_like(L), np.ones_like(L)
    d_lat = np.stack([
        zero, one, zero, zero,
        P, H, zero,
        2 * L, zero, zero,
        P * H,
        3 * L * L, P * P, H * H, 2 * L * P,
        zero, zero, 2 * L * H, zero,
        zero,
    ])
    d_lon = np.stack([
        zero, zero, one, zero,
        L, zero, H,
        zero, 2 * P, zero,
        L * H,
        zero, 2 * L * P, zero, L * L,
        3 * P * P, H * H, zero, 2 * P * H,
        zero,
    ])
    return d_lat, d_lon


@dataclass
class RpcModel:
    row_num: np.ndarray
    row_den: np.ndarray
    col_num: np.ndarray
    col_den: np.ndarray
    lat_offset: float
    lat_scale: float
    lon_offset: float
    lon_scale: float
    alt_offset: float
    alt_scale: float
    row_offset: float
    row_scale: float
    col_offset: float
    col_scale: float

    def __post_init__(self):
        for name in ("row_num", "row_den", "col_num", "col_den"):
            coeffs = np.asarray(getattr(self, name), dtype=np.float64)
            if coeffs.shape != (20,):
                raise DatasetError(f"{name} needs 20 coefficients, got {coeffs.size}")
            if not np.all(np.isfinite(coeffs)):
                raise DatasetError(f"{name} has non-finite coefficients")
            setattr(self, name, coeffs)
        for name in ("row_den", "col_den"):
            if getattr(self, name)[0] != 1.0:
                raise DatasetError(f"{name} constant term must be 1")
        for name in ("lat_scale", "lon_scale", "alt_scale", "row_scale", "col_scale"):
            if float(getattr(self, name)) == 0.0:
                raise DatasetError(f"{name} must be non-zero")

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RpcModel":
        try:
            kwargs = {k: float(d[k]) for k in RPC_SCALAR_KEYS}
            for k in ("row_num", "row_den", "col_num", "col_den"):
                kwargs[k] = np.asarray(d[k], dtype=np.float64)
        except KeyError as e:
            raise DatasetError(f"RPC is missing key {e.args[0]!r}")
        except (TypeError, ValueError) as e:
            raise DatasetError(f"malformed RPC: {e}")
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {k: float(getattr(self, k)) for k in RPC_SCALAR_KEYS}
        for k in ("row_num", "row_den", "col_num", "col_den"):
            out[k] = [float(v) for v in getattr(self, k)]
        return out

    def normalized_ground(self, lon, lat, alt):
        return ((np.asarray(lat, dtype=np.float64) - self.lat_offset) / self.lat_scale,
                (np.asarray(lon, dtype=np.float64) - self.lon_offset) / self.lon_scale,
                (np.asarray(alt, dtype=np.float64) - self.alt_offset) / self.alt_scale)

    def _ratios(self, L, P, H):
        m = rpc_monomials(L, P, H)
        row_den = np.tensordot(self.row_den, m, axes=1)
        col_den = np.tensordot(self.col_den, m, axes=1)
        if np.any(np.abs(row_den) < RPC_DENOMINATOR_EPS) or np.any(np.abs(col_den) < RPC_DENOMINATOR_EPS):
            raise SingularModelError("RPC denominator is numerically zero")
        return np.tensordot(self.row_num, m, axes=1) / row_den, np.tensordot(self.col_num, m, axes=1) / col_den

    def _ratio_jacobian(self, L, P, H):
        m = rpc_monomials(L, P, H)
        d_lat, d_lon = _rpc_monomial_partials(L, P, H)
        out = []
        for num, den in ((self.row_num, self.row_den), (self.col_num, self.col_den)):
            n, d = np.tensordot(num, m, axes=1), np.tensordot(den, m, axes=1)
            if np.any(np.abs(d) < RPC_DENOMINATOR_EPS):
                raise SingularModelError("RPC denominator is numerically zero")
            for dm in (d_lat, d_lon):
                dn, dd = np.tensordot(num, dm, axes=1), np.tensordot(den, dm, axes=1)
                out.append((dn * d - n * dd) / (d * d))
        # (d row/dL, d row/dP, d col/dL, d col/dP) in normalized units
        return tuple(out)

    # Camera protocol
    def localize_utm(self, rows, cols, alt, bounds: SceneBounds):
        lon, lat = rpc_localize(rows, cols, alt, self)
        return lonlat_to_utm(lon, lat, bounds)

    def project_utm(self, easting, northing, alt, bounds: SceneBounds):
        lon, lat = utm_to_lonlat(easting, northing, bounds)
        return rpc_project(lon, lat, alt, self, check_domain=False)


def rpc_project(lon, lat, alt, m: RpcModel, check_domain: bool = True):
    """Ground (deg, deg, m) -> image (row, col) in pixels."""
    L, P, H = m.normalized_ground(lon, lat, alt)
    if check_domain and any(np.any(np.abs(v) > RPC_DOMAIN_LIMIT) for v in (L, P, H)):
        raise DomainError(f"normalized ground coordinates outside [-{RPC_DOMAIN_LIMIT}, {RPC_DOMAIN_LIMIT}]")
    fr, fc = m._ratios(L, P, H)
    return _as_output(m.row_offset + m.row_scale * fr), _as_output(m.col_offset + m.col_scale * fc)


def rpc_localize(row, col, alt, m: RpcModel, max_iter: int = LOCALIZE_MAX_ITER,
                 tol_px: float = LOCALIZE_TOL_PX, with_iterations: bool = False):
    """
    Invert rpc_project at a fixed altitude with damped Newton steps on the
    normalized (lat, lon) pair. Steps are clamped to LOCALIZE_STEP_CLAMP in
    normalized units. Returns (lon, lat), optionally with the iteration count.
    """
    row = np.asarray(row, dtype=np.float64)
    col = np.asarray(col, dtype=np.float64)
    row, col, alt_b = np.broadcast_arrays(row, col, np.asarray(alt, dtype=np.float64))
    target_r = (row - m.row_offset) / m.row_scale
    target_c = (col - m.col_offset) / m.col_scale
    H = (alt_b - m.alt_offset) / m.alt_scale
    L = np.zeros_like(target_r)
    P = np.zeros_like(target_r)

    def residual_px(fr, fc):
        return np.hypot((fr - target_r) * m.row_scale, (fc - target_c) * m.col_scale)

    iterations = 0
    fr, fc = m._ratios(L, P, H)
    res = residual_px(fr, fc)
    while iterations < max_iter:
        if np.all(res < tol_px * 1e-3):
            break
        r_L, r_P, c_L, c_P = m._ratio_jacobian(L, P, H)
        det = r_L * c_P - r_P * c_L
        if np.any(np.abs(det) < 1e-15):
            raise LocalizationError("RPC Jacobian is singular", float(np.max(res)), iterations)
        er, ec = target_r - fr, target_c - fc
        dL = (c_P * er - r_P * ec) / det
        dP = (r_L * ec - c_L * er) / det
        step = np.maximum(np.abs(dL), np.abs(dP))
        shrink = np.where(step > LOCALIZE_STEP_CLAMP, LOCALIZE_STEP_CLAMP / np.maximum(step, 1e-300), 1.0)
        L = L + dL * shrink
        P = P + dP * shrink
        iterations += 1
        fr, fc = m._ratios(L, P, H)
        res = residual_px(fr, fc)
        if np.all(step < 1e-14):
            break

    worst = float(np.max(res)) if res.size else 0.0
    if worst > tol_px:
        raise LocalizationError("RPC localization did not converge", worst, iterations)
    lon = _as_output(P * m.lon_scale + m.lon_offset)
    lat = _as_output(L * m.lat_scale + m.lat_offset)
    if with_iterations:
        return lon, lat, iterations
    return lon, lat


# -------------------------- Affine (synthetic) camera --------------------------

@dataclass
class AffineCamera:
    """
    Orthographic-oblique camera: every pixel looks along the same direction.
    Pixel (row, col) sees the ray through the point of the plane z = ref_altitude
    at easting = center_e + (col - width/2)*gsd, northing = center_n - (row - height/2)*gsd.
    """
    width: int
    height: int
    gsd: float
    view_zenith_deg: float
    view_azimuth_deg: float
    center_easting: float
    center_northing: float
    ref_altitude: float

    @property
    def view_direction(self) -> np.ndarray:
        # from the camera toward the ground, east/north/up
        z = math.radians(self.view_zenith_deg)
        a = math.radians(self.view_azimuth_deg)
        return -np.array([math.sin(z) * math.sin(a), math.sin(z) * math.cos(a), math.cos(z)])

    def localize_utm(self, rows, cols, alt, bounds: Optional[SceneBounds] = None):
        d = self.view_direction
        e0 = self.center_easting + (np.asarray(cols, dtype=np.float64) - self.width / 2.0) * self.gsd
        n0 = self.center_northing - (np.asarray(rows, dtype=np.float64) - self.height / 2.0) * self.gsd
        s = (np.asarray(alt, dtype=np.float64) - self.ref_altitude) / d[2]
        return e0 + s * d[0], n0 + s * d[1]

    def project_utm(self, easting, northing, alt, bounds: Optional[SceneBounds] = None):
        d = self.view_direction
        s = (np.asarray(alt, dtype=np.float64) - self.ref_altitude) / d[2]
        e0 = np.asarray(easting, dtype=np.float64) - s * d[0]
        n0 = np.asarray(northing, dtype=np.float64) - s * d[1]
        col = (e0 - self.center_easting) / self.gsd + self.width / 2.0
        row = -(n0 - self.center_northing) / self.gsd + self.height / 2.0
        return _as_output(row), _as_output(col)

    def to_dict(self) -> Dict[str, Any]:
        return {"type": "affine", **{k: getattr(self, k) for k in self.__dataclass_fields__}}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "AffineCamera":
        try:
            return cls(
                width=int(d["width"]), height=int(d["height"]), gsd=float(d["gsd"]),
                view_zenith_deg=float(d["view_zenith_deg"]), view_azimuth_deg=float(d["view_azimuth_deg"]),
                center_easting=float(d["center_easting"]), center_northing=float(d["center_northing"]),
                ref_altitude=float(d["ref_altitude"]),
            )
        except KeyError as e:
            raise DatasetError(f"affine camera is missing key {e.args[0]!r}")


Camera = Union[RpcModel, AffineCamera]


def camera_from_record(record: Dict[str, Any]) -> Camera:
    if "rpc" in record:
        return RpcModel.from_dict(record["rpc"])
    cam = record.get("camera")
    if isinstance(cam, dict) and cam.get("type") == "affine":
        return AffineCamera.from_dict(cam)
    raise DatasetError("record has neither an 'rpc' block nor an affine 'camera' block")


def camera_to_record(camera: Camera) -> Dict[str, Any]:
    if isinstance(camera, RpcModel):
        return {"rpc": camera.to_dict()}
    return {"camera": camera.to_dict()}


# -------------------------- Rays --------------------------

@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        if abs(float(np.linalg.norm(self.direction)) - 1.0) > 1e-9:
            raise DomainError("ray direction must be a unit vector")
        if not self.t_near < self.t_far:
            raise DomainError("ray has an empty t range")

    def at(self, t) -> np.ndarray:
        return self.origin + np.multiply.outer(np.asarray(t, dtype=np.float64), self.direction)


@dataclass
class RayBatch:
    origins: np.ndarray      # (N, 3) normalized
    directions: np.ndarray   # (N, 3) unit
    t_near: np.ndarray       # (N,)
    t_far: np.ndarray        # (N,)
    hit: np.ndarray          # (N,) bool, False when the ray misses the unit cube

    def __len__(self) -> int:
        return len(self.t_near)

    def __getitem__(self, i: int) -> Ray:
        if not self.hit[i]:
            raise DomainError(f"ray {i} misses the scene cube")
        return Ray(self.origins[i].copy(), self.directions[i].copy(), float(self.t_near[i]), float(self.t_far[i]))


def clip_to_unit_cube(origins: np.ndarray, directions: np.ndarray):
    """Slab intersection against [0,1]^3. Returns (t_near, t_far, hit)."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (0.0 - o) * inv
        t1 = (1.0 - o) * inv
    t_lo = np.minimum(t0, t1)
    t_hi = np.maximum(t0, t1)
    # axis-parallel rays: inside the slab -> unbounded, outside -> empty
    parallel = d == 0.0
    inside = (o >= 0.0) & (o <= 1.0)
    t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), t_lo)
    t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), t_hi)
    t_near = np.max(t_lo, axis=-1)
    t_far = np.min(t_hi, axis=-1)
    t_near = np.maximum(t_near, 0.0)
    hit = t_far > t_near
    return t_near, t_far, hit


def rays_from_pixels(rows, cols, camera: Camera, b: SceneBounds) -> RayBatch:
    """Localize every pixel at the top and bottom altitudes and join the two points."""
    rows = np.atleast_1d(np.asarray(rows, dtype=np.float64))
    cols = np.atleast_1d(np.asarray(cols, dtype=np.float64))
    alt_min, alt_max = b.altitude_range
    e_hi, n_hi = camera.localize_utm(rows, cols, alt_max, b)
    e_lo, n_lo = camera.localize_utm(rows, cols, alt_min, b)
    high = normalize_point(np.stack([e_hi, n_hi, np.full_like(e_hi, alt_max)], axis=-1), b, check=False)
    low = normalize_point(np.stack([e_lo, n_lo, np.full_like(e_lo, alt_min)], axis=-1), b, check=False)
    d = low - high
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    t_near, t_far, hit = clip_to_unit_cube(high, d)
    return RayBatch(high, d, t_near, t_far, hit)


def ray_from_pixel(row: float, col: float, camera: Camera, b: SceneBounds) -> Ray:
    batch = rays_from_pixels([row], [col], camera, b)
    if not batch.hit[0]:
        raise DomainError(f"ray through pixel ({row}, {col}) misses the scene cube")
    return batch[0]


# -------------------------- Sun --------------------------

@dataclass(frozen=True)
class SunDirection:
    azimuth_deg: float
    elevation_deg: float
    vector: np.ndarray = field(repr=False)


def sun_vector(azimuth_deg: float, elevation_deg: float) -> SunDirection:
    """Direction of light travel (sun -> ground) in east/north/up, azimuth clockwise from north."""
    az, el = float(azimuth_deg), float(elevation_deg)
    if not 0.0 <= el <= 90.0:
        log.warning("sun elevation %.3f deg clamped to [0, 90]", el)
        el = min(max(el, 0.0), 90.0)
    if not 0.0 <= az < 360.0:
        log.warning("sun azimuth %.3f deg wrapped to [0, 360)", az)
        az = az % 360.0
    a, e = math.radians(az), math.radians(el)
    v = np.array([-math.sin(a) * math.cos(e), -math.cos(a) * math.cos(e), -math.sin(e)])
    return SunDirection(az, el, v)


def pixel_grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Row-major pixel centres (i + 0.5, j + 0.5)."""
    ii, jj = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return ii.ravel() + 0.5, jj.ravel() + 0.5


def solar_rays(points: np.ndarray, sun_dirs: np.ndarray, b: SceneBounds) -> RayBatch:
    """Rays through normalized points travelling along the (metric) sun directions."""
    d = normalize_direction(sun_dirs, b)
    t_near, t_far, _ = clip_to_unit_cube(points, -d)
    # start where the line enters the cube on the sun side
    origins = points - t_far[:, None] * d
    t_near2, t_far2, hit = clip_to_unit_cube(origins, d)
    return RayBatch(origins, d, t_near2, t_far2, hit)

