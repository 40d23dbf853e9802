"""Grid data model and bit-exact raster file I/O.

Two grid flavours are used everywhere: categorical land-use grids (integer
class ids plus a legend) and continuous driving-factor grids.  The canonical
interchange format is the ESRI ASCII grid; a packed little-endian binary
format is available for large grids (see `save_binary_grid`).

Rasters are immutable by convention after construction: no function in this
package mutates a raster it did not create.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

CATEGORICAL_NODATA = -9999
CONTINUOUS_NODATA = -9999.0

# binary grid format: magic, version byte, kind byte (0 categorical,
# 1 continuous), then '<iidddd' header (ncols, nrows, cellsize, xllcorner,
# yllcorner, nodata), a uint32-length-prefixed UTF-8 JSON legend block
# (empty for continuous), and the row-major payload (int32 / float64).
_BINARY_MAGIC = b"PSGR"
_BINARY_VERSION = 1


def _as_grid(values, width, height, dtype):
    arr = np.asarray(values, dtype=dtype)
    if arr.size != width * height:
        raise DataError(
            f"cell count mismatch: expected {width * height}, got {arr.size}"
        )
    return arr.reshape(height, width)


@dataclass(eq=False)
class CategoricalRaster:
    """Land-use class grid with a legend mapping class id -> name."""

    width: int
    height: int
    cell_size: float
    classes: dict[int, str]
    cells: np.ndarray  # (height, width) int32, row-major, north-up
    nodata: int = CATEGORICAL_NODATA
    xllcorner: float = 0.0
    yllcorner: float = 0.0

    def __post_init__(self):
        if self.cell_size <= 0:
            raise DataError("cell_size must be positive")
        self.cells = _as_grid(self.cells, self.width, self.height, np.int32)
        self.classes = {int(k): str(v) for k, v in self.classes.items()}
        present = np.unique(self.cells)
        unknown = [int(v) for v in present if v != self.nodata and int(v) not in self.classes]
        if unknown:
            raise DataError(f"cell ids missing from legend: {unknown}")

    @property
    def valid_mask(self):
        return self.cells != self.nodata

    def copy(self):
        return CategoricalRaster(
            self.width, self.height, self.cell_size, dict(self.classes),
            self.cells.copy(), self.nodata, self.xllcorner, self.yllcorner,
        )

    def __eq__(self, other):
        if not isinstance(other, CategoricalRaster):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.cell_size == other.cell_size
            and self.nodata == other.nodata
            and self.classes == other.classes
            and np.array_equal(self.cells, other.cells)
        )


@dataclass(eq=False)
class ContinuousRaster:
    """Real-valued grid for one driving factor."""

    width: int
    height: int
    cell_size: float
    values: np.ndarray  # (height, width) float64
    nodata: float = CONTINUOUS_NODATA
    xllcorner: float = 0.0
    yllcorner: float = 0.0

    def __post_init__(self):
        if self.cell_size <= 0:
            raise DataError("cell_size must be positive")
        self.values = _as_grid(self.values, self.width, self.height, np.float64)
        bad = ~np.isfinite(self.values) & (self.values != self.nodata)
        if bad.any():
            raise DataError("continuous raster contains non-finite values")

    @property
    def valid_mask(self):
        return (self.values != self.nodata) & np.isfinite(self.values)

    def __eq__(self, other):
        if not isinstance(other, ContinuousRaster):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.cell_size == other.cell_size
            and self.nodata == other.nodata
            and np.array_equal(self.values, other.values)
        )


@dataclass
class FactorStack:
    """Ordered, aligned stack of named driving-factor layers."""

    layers: list[tuple[str, ContinuousRaster]] = field(default_factory=list)

    def __post_init__(self):
        names = [name for name, _ in self.layers]
        if len(set(names)) != len(names):
            raise DataError("factor layer names must be unique")
        if self.layers:
            assert_aligned([r for _, r in self.layers], names=names)

    @property
    def names(self):
        return [name for name, _ in self.layers]

    def __len__(self):
        return len(self.layers)

    def valid_mask(self):
        """Cells where every layer has a defined value."""
        mask = np.ones_like(self.layers[0][1].valid_mask)
        for _, layer in self.layers:
            mask &= layer.valid_mask
        return mask

    def values_at(self, flat_indices):
        """Feature matrix (n, F) gathered at the given flat cell indices."""
        cols = [layer.values.ravel()[flat_indices] for _, layer in self.layers]
        return np.column_stack(cols)


def assert_aligned(rasters, names=None):
    """Raise DataError naming the first raster that breaks grid alignment."""
    if not rasters:
        raise DataError("no rasters given")
    ref = rasters[0]
    for i, r in enumerate(rasters[1:], start=1):
        label = names[i] if names else f"raster {i}"
        if (r.width, r.height) != (ref.width, ref.height):
            raise DataError(
                f"{label}: grid {r.width}x{r.height} does not match "
                f"{ref.width}x{ref.height}"
            )
        if r.cell_size != ref.cell_size:
            raise DataError(
                f"{label}: cell size {r.cell_size} does not match {ref.cell_size}"
            )


def class_areas(raster):
    """Cell counts per legend class, nodata excluded.

    Every legend id is present in the result, zero-count classes included.
    """
    valid = raster.cells[raster.valid_mask]
    ids, counts = np.unique(valid, return_counts=True)
    areas = {int(cid): 0 for cid in raster.classes}
    for cid, cnt in zip(ids, counts):
        areas[int(cid)] = int(cnt)
    return areas


def cells_to_hectares(count, cell_size):
    return count * cell_size * cell_size / 1e4


# --- ESRI ASCII grid -------------------------------------------------------

_HEADER_KEYS = {"ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"}


def _parse_header(lines):
    header = {}
    body_start = 0
    for i, line in enumerate(lines):
        parts = line.split()
        if len(parts) == 2 and parts[0].lower() in _HEADER_KEYS:
            key = parts[0].lower()
            try:
                header[key] = int(parts[1]) if key in ("ncols", "nrows") else float(parts[1])
            except ValueError as exc:
                raise DataError(f"malformed header line: {line!r}") from exc
            body_start = i + 1
        elif parts and parts[0][0].isalpha():
            raise DataError(f"malformed header line: {line!r}")
        else:
            break
    for req in ("ncols", "nrows", "cellsize"):
        if req not in header:
            raise DataError(f"malformed header: missing {req}")
    return header, body_start


def load_ascii_grid(path, kind="auto"):
    """Load an ESRI ASCII grid.

    kind: "auto" returns a CategoricalRaster when every cell token parses as
    an integer, otherwise a ContinuousRaster; "categorical"/"continuous"
    force the type.  Values are parsed exactly as written.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header, body_start = _parse_header(lines)
    ncols, nrows = header["ncols"], header["nrows"]
    cell_size = header["cellsize"]
    xll = header.get("xllcorner", 0.0)
    yll = header.get("yllcorner", 0.0)
    tokens = " ".join(lines[body_start:]).split()
    if len(tokens) != ncols * nrows:
        raise DataError(
            f"cell count mismatch: header declares {ncols * nrows} cells, "
            f"file has {len(tokens)}"
        )

    as_int = None
    if kind in ("auto", "categorical"):
        try:
            as_int = np.array(tokens, dtype=np.int64)
        except ValueError:
            if kind == "categorical":
                raise DataError("non-numeric or non-integer token in categorical grid")
            as_int = None
    if as_int is not None:
        nodata = int(header.get("nodata_value", CATEGORICAL_NODATA))
        legend = {int(v): str(int(v)) for v in np.unique(as_int) if v != nodata}
        return CategoricalRaster(ncols, nrows, cell_size, legend, as_int,
                                 nodata, xll, yll)
    try:
        values = np.array(tokens, dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"non-numeric token in grid body: {exc}") from exc
    nodata = float(header.get("nodata_value", CONTINUOUS_NODATA))
    return ContinuousRaster(ncols, nrows, cell_size, values, nodata, xll, yll)


def _format_number(value):
    # shortest round-trip decimal form
    return repr(float(value))


def save_ascii_grid(raster, path):
    """Write a raster as an ESRI ASCII grid re-loadable by load_ascii_grid."""
    categorical = isinstance(raster, CategoricalRaster)
    nodata = raster.nodata
    header = (
        f"ncols {raster.width}\n"
        f"nrows {raster.height}\n"
        f"xllcorner {_format_number(raster.xllcorner)}\n"
        f"yllcorner {_format_number(raster.yllcorner)}\n"
        f"cellsize {_format_number(raster.cell_size)}\n"
        f"NODATA_value {nodata if categorical else _format_number(nodata)}\n"
    )
    grid = raster.cells if categorical else raster.values
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header)
        if categorical:
            for row in grid:
                fh.write(" ".join(str(int(v)) for v in row))
                fh.write("\n")
        else:
            for row in grid:
                fh.write(" ".join(repr(float(v)) for v in row))
                fh.write("\n")


# --- packed binary grid ----------------------------------------------------

def save_binary_grid(raster, path):
    """Write the packed binary form (format documented at module top)."""
    categorical = isinstance(raster, CategoricalRaster)
    kind = 0 if categorical else 1
    legend_blob = b""
    if categorical:
        legend_blob = json.dumps(raster.classes, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_BINARY_MAGIC)
        fh.write(struct.pack("<BB", _BINARY_VERSION, kind))
        fh.write(struct.pack(
            "<iidddd", raster.width, raster.height, raster.cell_size,
            raster.xllcorner, raster.yllcorner, float(raster.nodata),
        ))
        fh.write(struct.pack("<I", len(legend_blob)))
        fh.write(legend_blob)
        payload = raster.cells if categorical else raster.values
        dtype = "<i4" if categorical else "<f8"
        fh.write(np.ascontiguousarray(payload, dtype=dtype).tobytes())


def load_binary_grid(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _BINARY_MAGIC:
            raise DataError("not a packed binary grid (bad magic)")
        version, kind = struct.unpack("<BB", fh.read(2))
        if version != _BINARY_VERSION:
            raise DataError(f"unsupported binary grid version {version}")
        width, height, cell_size, xll, yll, nodata = struct.unpack(
            "<iidddd", fh.read(struct.calcsize("<iidddd"))
        )
        (legend_len,) = struct.unpack("<I", fh.read(4))
        legend_blob = fh.read(legend_len)
        dtype = "<i4" if kind == 0 else "<f8"
        payload = np.frombuffer(fh.read(), dtype=dtype)
    if payload.size != width * height:
        raise DataError(
            f"cell count mismatch: expected {width * height}, got {payload.size}"
        )
    if kind == 0:
        legend = {int(k): v for k, v in json.loads(legend_blob.decode("utf-8")).items()}
        return CategoricalRaster(width, height, cell_size, legend,
                                 payload.copy(), int(nodata), xll, yll)
    return ContinuousRaster(width, height, cell_size, payload.copy(),
                            nodata, xll, yll)


def load_grid(path):
    """Dispatch on file content: binary grids by magic, ASCII otherwise."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == _BINARY_MAGIC:
        return load_binary_grid(path)
    return load_ascii_grid(path)
