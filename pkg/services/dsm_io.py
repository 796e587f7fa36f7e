"""DSM rasters and their ESRI ASCII grid files"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Union

import numpy as np

from services.errors import DataMismatchError, DatasetError

log = logging.getLogger(__name__)

NODATA = -9999.0
DEFAULT_CELL_SIZE = 0.5
HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


@dataclass
class DsmRaster:
    """
    Row-major altitudes; row 0 is the northernmost row. The origin is the
    lower-left (south-west) corner of the raster in UTM meters.
    """
    origin_easting: float
    origin_northing: float
    cell_size: float
    altitudes: np.ndarray   # (height, width), NODATA where empty

    def __post_init__(self):
        self.altitudes = np.asarray(self.altitudes, dtype=np.float64)
        if self.altitudes.ndim != 2 or min(self.altitudes.shape) < 1:
            raise DataMismatchError("DSM altitudes must be a non-empty 2-D array", self.altitudes.shape)
        if not self.cell_size > 0:
            raise DataMismatchError("DSM cell size must be positive", (self.cell_size,))
        bad = ~np.isfinite(self.altitudes)
        if bad.any():
            self.altitudes = np.where(bad, NODATA, self.altitudes)

    @property
    def height(self) -> int:
        return self.altitudes.shape[0]

    @property
    def width(self) -> int:
        return self.altitudes.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.altitudes != NODATA

    def cell_centers(self):
        """(easting, northing) grids of every cell centre, row 0 north."""
        e = self.origin_easting + (np.arange(self.width) + 0.5) * self.cell_size
        n = self.origin_northing + (self.height - np.arange(self.height) - 0.5) * self.cell_size
        return np.meshgrid(e, n)

    def same_grid(self, other: "DsmRaster") -> bool:
        return (self.altitudes.shape == other.altitudes.shape
                and self.cell_size == other.cell_size
                and self.origin_easting == other.origin_easting
                and self.origin_northing == other.origin_northing)


def write_dsm(raster: DsmRaster, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = "\n".join([
        f"ncols {raster.width}",
        f"nrows {raster.height}",
        f"xllcorner {raster.origin_easting!r}",
        f"yllcorner {raster.origin_northing!r}",
        f"cellsize {raster.cell_size!r}",
        f"NODATA_value {NODATA!r}",
    ])
    np.savetxt(path, raster.altitudes, fmt="%.3f", header=header, comments="")
    log.debug("wrote %dx%d DSM to %s", raster.height, raster.width, path)
    return path


def read_dsm(path: Union[str, Path]) -> DsmRaster:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"DSM file not found: {path}")
    header: Dict[str, str] = {}
    with path.open() as f:
        for number, key in enumerate(HEADER_KEYS, start=1):
            line = f.readline()
            parts = line.split()
            if len(parts) != 2 or parts[0].lower() != key:
                raise DatasetError(f"malformed header at line {number}: {line.rstrip()!r}", str(path))
            header[key] = parts[1]
        try:
            ncols, nrows = int(header["ncols"]), int(header["nrows"])
            nodata = float(header["nodata_value"])
            alt = np.loadtxt(f, dtype=np.float64, ndmin=2)
        except ValueError as e:
            raise DatasetError(f"parse error: {e}", str(path))
    if alt.shape != (nrows, ncols):
        raise DatasetError(f"expected {nrows} rows of {ncols} values, found {alt.shape}", str(path))
    alt = np.where(alt == nodata, NODATA, alt)
    return DsmRaster(float(header["xllcorner"]), float(header["yllcorner"]), float(header["cellsize"]), alt)
