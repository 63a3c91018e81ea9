"""Cell-registered lat/lon rasters: I/O, block coarsening and bicubic resampling.

All grids are stored with rows ordered by increasing latitude and columns by
increasing longitude. Missing cells are NaN.
"""

from __future__ import annotations

import datetime as dt
import enum
import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codes import CLIMATE_NODATA, KOPPEN_CODES, LANDCOVER_NODATA, WORLDCOVER_CLASSES
from .errors import (
    DataError,
    DimensionMismatchError,
    ExtentError,
    MissingVariableError,
    NonUniformGridError,
)

COORD_TOL = 1e-6  # degrees, coordinate spacing uniformity
EXTENT_TOL = 1e-9  # degrees, extent arithmetic
BICUBIC_A = -0.5


class RasterKind(str, enum.Enum):
    EMISSION = "emission"  # mol cm-2 s-1
    LAI = "lai"  # m2/m2
    PERCENTAGE = "percentage"  # 0-100
    CLIMATE_CLASS = "climate_class"  # Koppen-Geiger code


@dataclass(frozen=True)
class GeoExtent:
    """Bounding box in degrees plus the edge length of a square cell."""

    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float
    cell_size: float

    def __post_init__(self):
        if not (self.lon_min < self.lon_max and self.lat_min < self.lat_max):
            raise ExtentError(f"degenerate extent {self}")
        if not self.cell_size > 0:
            raise ExtentError("cell_size must be positive")
        for span in (self.lon_max - self.lon_min, self.lat_max - self.lat_min):
            n = round(span / self.cell_size)
            if n < 1 or abs(span - n * self.cell_size) > EXTENT_TOL:
                raise ExtentError(
                    f"extent span {span!r} is not a multiple of cell size {self.cell_size!r}"
                )

    @property
    def nrows(self) -> int:
        return round((self.lat_max - self.lat_min) / self.cell_size)

    @property
    def ncols(self) -> int:
        return round((self.lon_max - self.lon_min) / self.cell_size)

    @property
    def shape(self) -> tuple[int, int]:
        return self.nrows, self.ncols

    @property
    def center(self) -> tuple[float, float]:
        """(lon, lat) of the extent centre."""
        return 0.5 * (self.lon_min + self.lon_max), 0.5 * (self.lat_min + self.lat_max)

    def lat_centers(self) -> np.ndarray:
        return self.lat_min + (np.arange(self.nrows) + 0.5) * self.cell_size

    def lon_centers(self) -> np.ndarray:
        return self.lon_min + (np.arange(self.ncols) + 0.5) * self.cell_size

    @classmethod
    def from_centers(cls, lat: np.ndarray, lon: np.ndarray) -> "GeoExtent":
        """Build an extent from ascending, uniformly spaced cell-centre coordinates."""
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        if lat.size < 2 or lon.size < 2:
            raise DimensionMismatchError("need at least two cells per axis to infer spacing")
        steps = np.concatenate([np.diff(lat), np.diff(lon)])
        cs = float(np.mean(steps))
        if np.max(np.abs(steps - cs)) > COORD_TOL:
            raise NonUniformGridError("coordinate spacing is not uniform")
        # Snap to a short decimal so 0.1 stays 0.1 rather than 0.09999999999.
        cs = float(np.round(cs, 9))
        lon_min = float(np.round(lon[0] - cs / 2, 9))
        lat_min = float(np.round(lat[0] - cs / 2, 9))
        return cls(
            lon_min=lon_min,
            lon_max=float(np.round(lon_min + lon.size * cs, 9)),
            lat_min=lat_min,
            lat_max=float(np.round(lat_min + lat.size * cs, 9)),
            cell_size=cs,
        )

    def with_cell_size(self, cell_size: float) -> "GeoExtent":
        return GeoExtent(self.lon_min, self.lon_max, self.lat_min, self.lat_max, cell_size)

    def window(self, row: int, col: int, nrows: int, ncols: int) -> "GeoExtent":
        """Sub-extent covering ``nrows x ncols`` cells starting at (row, col)."""
        cs = self.cell_size
        lat0 = self.lat_min + row * cs
        lon0 = self.lon_min + col * cs
        return GeoExtent(
            float(np.round(lon0, 9)),
            float(np.round(lon0 + ncols * cs, 9)),
            float(np.round(lat0, 9)),
            float(np.round(lat0 + nrows * cs, 9)),
            cs,
        )

    def contains(self, other: "GeoExtent", tol: float = EXTENT_TOL) -> bool:
        return (
            other.lon_min >= self.lon_min - tol
            and other.lon_max <= self.lon_max + tol
            and other.lat_min >= self.lat_min - tol
            and other.lat_max <= self.lat_max + tol
        )

    def overlaps(self, other: "GeoExtent") -> bool:
        return (
            min(self.lon_max, other.lon_max) - max(self.lon_min, other.lon_min) > EXTENT_TOL
            and min(self.lat_max, other.lat_max) - max(self.lat_min, other.lat_min) > EXTENT_TOL
        )

    def same_grid(self, other: "GeoExtent") -> bool:
        return (
            abs(self.cell_size - other.cell_size) <= EXTENT_TOL
            and abs(self.lon_min - other.lon_min) <= EXTENT_TOL
            and abs(self.lat_min - other.lat_min) <= EXTENT_TOL
            and self.shape == other.shape
        )

    def to_dict(self) -> dict:
        return {
            "lon_min": self.lon_min,
            "lon_max": self.lon_max,
            "lat_min": self.lat_min,
            "lat_max": self.lat_max,
            "cell_size": self.cell_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeoExtent":
        return cls(d["lon_min"], d["lon_max"], d["lat_min"], d["lat_max"], d["cell_size"])


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class RasterGrid:
    """A 2-D float raster on a :class:`GeoExtent`; immutable after construction."""

    extent: GeoExtent
    data: np.ndarray
    kind: RasterKind = RasterKind.EMISSION
    timestamp: dt.date | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.shape != self.extent.shape:
            raise DimensionMismatchError(
                f"data shape {data.shape} does not match extent shape {self.extent.shape}"
            )
        kind = RasterKind(self.kind)
        valid = data[~np.isnan(data)]
        if kind is RasterKind.PERCENTAGE and valid.size and (valid.min() < 0 or valid.max() > 100):
            raise DataError("percentage grid has values outside [0, 100]")
        if kind is RasterKind.EMISSION and valid.size and valid.min() < 0:
            raise DataError("emission grid has negative values")
        if kind is RasterKind.CLIMATE_CLASS and valid.size:
            bad = set(np.unique(valid).astype(int)) - set(KOPPEN_CODES)
            if bad or np.any(valid != np.round(valid)):
                raise DataError(f"climate grid has unknown class codes {sorted(bad)}")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "kind", kind)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def replace(self, data: np.ndarray | None = None, **changes) -> "RasterGrid":
        return RasterGrid(
            extent=changes.get("extent", self.extent),
            data=self.data if data is None else data,
            kind=changes.get("kind", self.kind),
            timestamp=changes.get("timestamp", self.timestamp),
        )


@dataclass(frozen=True, eq=False)
class CategoricalLandCover:
    """Fine-resolution land-cover class map (WorldCover codes, 0 = no data)."""

    extent: GeoExtent
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.int32, copy=True)
        if data.shape != self.extent.shape:
            raise DimensionMismatchError(
                f"data shape {data.shape} does not match extent shape {self.extent.shape}"
            )
        bad = set(np.unique(data).tolist()) - set(WORLDCOVER_CLASSES) - {LANDCOVER_NODATA}
        if bad:
            raise DataError(f"land cover has unknown class codes {sorted(bad)}")
        object.__setattr__(self, "data", _readonly(data))


# ---------------------------------------------------------------------------
# NetCDF I/O

_LAT_NAMES = ("lat", "latitude", "y")
_LON_NAMES = ("lon", "longitude", "x")
_TIME_NAMES = ("time", "t", "date")
_MISSING_ATTRS = ("_FillValue", "missing_value")


class _Var:
    """Backend-neutral view of one variable: dims, attrs and lazily read data."""

    def __init__(self, dims, attrs, reader):
        self.dims = tuple(dims)
        self.attrs = attrs
        self._reader = reader

    def read(self, index=()):
        return np.asarray(self._reader(index))


def _decode(v):
    if isinstance(v, bytes):
        return v.decode("utf-8", "replace")
    if isinstance(v, np.ndarray) and v.size == 1:
        return v.reshape(()).item()
    return v


def _open_netcdf3(path):
    from scipy.io import netcdf_file

    f = netcdf_file(path, "r", mmap=False, maskandscale=False)
    variables = {}
    for name, var in f.variables.items():
        attrs = {k: _decode(v) for k, v in var._attributes.items()}
        variables[name] = _Var(var.dimensions, attrs, lambda idx, var=var: var.data[idx])
    return f, variables


def _open_hdf5(path):
    import h5py

    f = h5py.File(path, "r")
    variables = {}
    for name, ds in f.items():
        if not isinstance(ds, h5py.Dataset):
            continue
        dims = []
        for i, scale in enumerate(ds.dims):
            dims.append(scale[0].name.lstrip("/") if len(scale) else f"dim{i}")
        attrs = {k: _decode(v) for k, v in ds.attrs.items()}
        variables[name] = _Var(dims, attrs, lambda idx, ds=ds: ds[idx] if idx else ds[()])
    return f, variables


def _open(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    try:
        return _open_netcdf3(path)
    except (TypeError, ValueError):
        pass
    try:
        return _open_hdf5(path)
    except OSError as exc:
        raise DataError(f"{path}: not a NetCDF file ({exc})") from None


def _find(variables, names, what):
    for n in names:
        if n in variables:
            return n
    raise MissingVariableError(f"no {what} coordinate variable (tried {', '.join(names)})")


def _parse_time(values, units: str | None) -> list[dt.date]:
    if not units or " since " not in units:
        raise DataError(f"unsupported time units {units!r}")
    step, origin = units.split(" since ", 1)
    origin = dt.datetime.fromisoformat(origin.strip().replace("T", " ").split(" ")[0])
    scale = {"days": 86400.0, "day": 86400.0, "hours": 3600.0, "hour": 3600.0,
             "minutes": 60.0, "seconds": 1.0}.get(step.strip().lower())
    if scale is None:
        raise DataError(f"unsupported time step {step!r}")
    return [(origin + dt.timedelta(seconds=float(v) * scale)).date() for v in np.ravel(values)]


def _read_arrays(path, variable, time_index, missing_value):
    """Read ``variable`` as float arrays with NaN for missing cells.

    Returns (extent, [(data, date), ...], attrs); rows/cols are flipped to
    ascending latitude/longitude when the file stores them descending.
    """
    f, variables = _open(path)
    try:
        if variable not in variables:
            raise MissingVariableError(f"{path}: variable {variable!r} not found")
        var = variables[variable]
        lat_name = _find(variables, _LAT_NAMES, "latitude")
        lon_name = _find(variables, _LON_NAMES, "longitude")
        if var.dims[-2:] != (lat_name, lon_name) or len(var.dims) not in (2, 3):
            raise DimensionMismatchError(
                f"{variable!r} has dims {var.dims}; expected (time?, {lat_name}, {lon_name})"
            )
        lat = variables[lat_name].read().astype(np.float64)
        lon = variables[lon_name].read().astype(np.float64)
        flip_lat = lat.size > 1 and lat[1] < lat[0]
        flip_lon = lon.size > 1 and lon[1] < lon[0]
        extent = GeoExtent.from_centers(lat[::-1] if flip_lat else lat,
                                        lon[::-1] if flip_lon else lon)

        raw_all = var.read()
        if len(var.dims) == 3:
            ntime = raw_all.shape[0]
            tvar = variables.get(var.dims[0])
            if tvar is None:
                tvar = next((variables[n] for n in _TIME_NAMES if n in variables), None)
            dates = (_parse_time(tvar.read(), tvar.attrs.get("units"))
                     if tvar is not None else [None] * ntime)
            if time_index is not None and not -ntime <= time_index < ntime:
                raise DimensionMismatchError(f"time_index {time_index} out of range ({ntime})")
            indices = range(ntime) if time_index is None else [time_index]
        else:
            dates, indices = [None], [None]

        fills = [var.attrs[a] for a in _MISSING_ATTRS if a in var.attrs]
        if missing_value is not None:
            fills.append(missing_value)
        scale = var.attrs.get("scale_factor")
        offset = var.attrs.get("add_offset")

        slices = []
        for i in indices:
            raw = raw_all if i is None else raw_all[i]
            if raw.shape != (lat.size, lon.size):
                raise DimensionMismatchError(
                    f"{variable!r} slice shape {raw.shape} does not match coordinates "
                    f"({lat.size}, {lon.size})"
                )
            data = raw.astype(np.float64)
            missing = np.isnan(data)
            for fv in fills:
                missing |= raw == fv
            if scale is not None:
                data = data * float(scale)
            if offset is not None:
                data = data + float(offset)
            data[missing] = np.nan
            if flip_lat:
                data = data[::-1]
            if flip_lon:
                data = data[:, ::-1]
            slices.append((np.ascontiguousarray(data), dates[0 if i is None else i]))
        return extent, slices, var.attrs
    finally:
        f.close()


def _kind_of(attrs, kind):
    if kind is not None:
        return RasterKind(kind)
    return RasterKind(attrs.get("kind", RasterKind.EMISSION.value))


def _mask_class_nodata(data, kind):
    if kind is RasterKind.CLIMATE_CLASS:
        data = np.where(data == CLIMATE_NODATA, np.nan, data)
    return data


def load_raster(path, variable: str, time_index: int | None = None,
                kind: RasterKind | None = None, missing_value: float | None = None) -> RasterGrid:
    """Load one 2-D slice of ``variable`` from a NetCDF file.

    The extent is inferred from the ``lat``/``lon`` cell-centre coordinates.
    Values equal to ``_FillValue``, ``missing_value`` or the ``missing_value``
    argument become NaN. For a time-stacked variable ``time_index`` selects the
    slice; it may be omitted only when the time axis has length one.

    Raises
    ------
    MissingVariableError, NonUniformGridError, DimensionMismatchError
    """
    extent, slices, attrs = _read_arrays(path, variable, time_index, missing_value)
    if len(slices) != 1:
        raise DimensionMismatchError(
            f"{variable!r} has {len(slices)} time steps; pass time_index or use load_raster_series"
        )
    data, date = slices[0]
    kind = _kind_of(attrs, kind)
    return RasterGrid(extent, _mask_class_nodata(data, kind), kind, date)


def load_raster_series(path, variable: str, kind: RasterKind | None = None,
                       missing_value: float | None = None) -> list[RasterGrid]:
    """Load every time slice of ``variable`` (a single grid for 2-D variables)."""
    extent, slices, attrs = _read_arrays(path, variable, None, missing_value)
    kind = _kind_of(attrs, kind)
    return [RasterGrid(extent, _mask_class_nodata(data, kind), kind, date) for data, date in slices]


def load_landcover(path, variable: str = "lc") -> CategoricalLandCover:
    """Load a categorical land-cover map; missing cells become class 0 (no data)."""
    extent, slices, _ = _read_arrays(path, variable, 0, None)
    data = np.nan_to_num(slices[0][0], nan=LANDCOVER_NODATA)
    return CategoricalLandCover(extent, data.astype(np.int32))


FILL_VALUE = -9999.0
_EPOCH = dt.date(1970, 1, 1)


def _write_netcdf(path, extent, arrays, dates, variable, attrs):
    from scipy.io import netcdf_file

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with netcdf_file(path, "w", version=2) as f:
        f.createDimension("lat", extent.nrows)
        f.createDimension("lon", extent.ncols)
        lat = f.createVariable("lat", "f8", ("lat",))
        lat[:] = extent.lat_centers()
        lat.units = "degrees_north"
        lon = f.createVariable("lon", "f8", ("lon",))
        lon[:] = extent.lon_centers()
        lon.units = "degrees_east"
        dims = ("lat", "lon")
        if dates is not None:
            f.createDimension("time", len(arrays))
            t = f.createVariable("time", "f8", ("time",))
            t[:] = [(d - _EPOCH).days for d in dates]
            t.units = "days since 1970-01-01"
            dims = ("time",) + dims
        v = f.createVariable(variable, "f8", dims)
        v.missing_value = FILL_VALUE
        for k, val in attrs.items():
            setattr(v, k, val)
        stack = np.stack([np.where(np.isnan(a), FILL_VALUE, a) for a in arrays])
        v[:] = stack if dates is not None else stack[0]


def save_raster(grids, path, variable: str) -> None:
    """Write one grid, or a same-extent time series of grids, as NetCDF-3."""
    if isinstance(grids, RasterGrid):
        grids = [grids]
    grids = list(grids)
    ext = grids[0].extent
    if any(not g.extent.same_grid(ext) for g in grids):
        raise ExtentError("all grids in a series must share one extent")
    timed = all(g.timestamp is not None for g in grids)
    if not timed and len(grids) > 1:
        raise DataError("a multi-grid series needs timestamps")
    dates = [g.timestamp for g in grids] if timed else None
    _write_netcdf(path, ext, [g.data for g in grids], dates, variable,
                  {"kind": grids[0].kind.value})


def save_landcover(lc: CategoricalLandCover, path, variable: str = "lc") -> None:
    _write_netcdf(path, lc.extent, [lc.data.astype(np.float64)], None, variable,
                  {"flag_meaning": "ESA WorldCover v200 codes"})


# ---------------------------------------------------------------------------
# Raw binary records used by the patch store.
#
# 32-byte header: magic "BSRK", version u16, rows u32, cols u32, cell_size f64,
# 10 reserved zero bytes; followed by rows*cols little-endian float64 (row-major).

BINARY_MAGIC = b"BSRK"
BINARY_VERSION = 1
_HEADER = struct.Struct("<4sHIId10x")
assert _HEADER.size == 32


def pack_array(arr: np.ndarray, cell_size: float) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim != 2:
        raise ValueError("only 2-D arrays can be packed")
    header = _HEADER.pack(BINARY_MAGIC, BINARY_VERSION, arr.shape[0], arr.shape[1], float(cell_size))
    return header + np.ascontiguousarray(arr).tobytes()


def unpack_array(buf, offset: int = 0) -> tuple[np.ndarray, float, int]:
    """Decode one record at ``offset``; returns (array, cell_size, next_offset)."""
    magic, version, rows, cols, cell_size = _HEADER.unpack_from(buf, offset)
    if magic != BINARY_MAGIC:
        raise DataError(f"bad record magic {magic!r} at offset {offset}")
    if version != BINARY_VERSION:
        raise DataError(f"unsupported record version {version}")
    start = offset + _HEADER.size
    end = start + rows * cols * 8
    if end > len(buf):
        raise DataError("truncated record")
    arr = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=start).reshape(rows, cols)
    return arr.astype(np.float64), cell_size, end


# ---------------------------------------------------------------------------
# Block coarsening

def _block_factor(src_cell: float, target_cell: float) -> int:
    ratio = target_cell / src_cell
    f = round(ratio)
    if f < 1 or abs(ratio - f) > 1e-9 * max(ratio, 1.0):
        raise ExtentError(f"target cell {target_cell} is not an integer multiple of {src_cell}")
    return f


def coarsen(src, target_cell_size: float, mode: str = "mean", cls: int | None = None,
            chunk_rows: int = 256) -> RasterGrid:
    """Aggregate ``src`` onto a coarser grid with the same bounds.

    ``mode="mean"`` averages each block, ignoring missing cells (an all-missing
    block stays missing). ``mode="fraction"`` returns the percentage of
    non-missing cells in each block equal to ``cls``. Blocks are processed in
    bands of ``chunk_rows`` output rows so memory stays bounded on large maps.
    """
    f = _block_factor(src.extent.cell_size, target_cell_size)
    nrows, ncols = src.extent.shape
    if nrows % f or ncols % f:
        raise ExtentError(
            f"source extent {src.extent.shape} does not hold a whole number of {f}x{f} blocks"
        )
    out_rows, out_cols = nrows // f, ncols // f
    if out_rows == 0 or out_cols == 0:
        raise ExtentError("empty overlap between source and target grid")
    target = src.extent.with_cell_size(target_cell_size)

    if mode == "fraction":
        if cls is None:
            raise ValueError("mode='fraction' needs cls")
        categorical = isinstance(src, CategoricalLandCover)
    elif mode != "mean":
        raise ValueError(f"unknown coarsening mode {mode!r}")
    elif isinstance(src, CategoricalLandCover):
        raise ValueError("block mean of a categorical map is meaningless; use mode='fraction'")

    out = np.empty((out_rows, out_cols))
    for r0 in range(0, out_rows, chunk_rows):
        r1 = min(out_rows, r0 + chunk_rows)
        block = src.data[r0 * f:r1 * f].reshape(r1 - r0, f, out_cols, f)
        if mode == "mean":
            valid = ~np.isnan(block)
            total = np.where(valid, block, 0.0).sum(axis=(1, 3))
            count = valid.sum(axis=(1, 3))
        else:
            valid = block != LANDCOVER_NODATA if categorical else ~np.isnan(block)
            total = 100.0 * (valid & (block == cls)).sum(axis=(1, 3))
            count = valid.sum(axis=(1, 3))
        with np.errstate(invalid="ignore", divide="ignore"):
            out[r0:r1] = np.where(count > 0, total / np.maximum(count, 1), np.nan)

    if mode == "fraction":
        return RasterGrid(target, np.clip(out, 0.0, 100.0), RasterKind.PERCENTAGE)
    return RasterGrid(target, out, src.kind, src.timestamp)


# ---------------------------------------------------------------------------
# Bicubic (cubic convolution) interpolation

def cubic_kernel(s, a: float = BICUBIC_A):
    """Keys' two-parameter cubic convolution kernel."""
    s = np.abs(np.asarray(s, dtype=np.float64))
    s2, s3 = s * s, s * s * s
    near = (a + 2) * s3 - (a + 3) * s2 + 1
    far = a * s3 - 5 * a * s2 + 8 * a * s - 4 * a
    return np.where(s <= 1, near, np.where(s < 2, far, 0.0))


def reflect_index(idx, n: int):
    """Half-sample symmetric extension: -1 -> 0, n -> n-1, periodic with period 2n."""
    m = np.mod(idx, 2 * n)
    return np.where(m >= n, 2 * n - 1 - m, m)


def _taps(positions: np.ndarray, n_src: int):
    """Source indices and weights for positions given in source-index units
    (cell i has its centre at position i)."""
    i0 = np.floor(positions).astype(np.int64)
    t = positions - i0
    offsets = np.arange(-1, 3)
    idx = reflect_index(i0[:, None] + offsets, n_src)
    w = cubic_kernel(t[:, None] - offsets)
    return idx, w


def _dense(idx: np.ndarray, w: np.ndarray, n_src: int) -> np.ndarray:
    m = np.zeros((idx.shape[0], n_src))
    np.add.at(m, (np.repeat(np.arange(idx.shape[0]), idx.shape[1]), idx.ravel()), w.ravel())
    return m


def _fill_nearest(a: np.ndarray, axis: int) -> np.ndarray:
    """Replace NaNs along a length-4 ``axis`` with the nearest non-NaN entry
    (ties go to the lower index). All-NaN lines stay NaN."""
    a = np.moveaxis(a, axis, -1)
    pos = np.arange(a.shape[-1])
    dist = np.abs(pos[:, None] - pos[None, :]).astype(np.float64)  # [target, source]
    penalty = np.where(np.isnan(a), np.inf, 0.0)[..., None, :]
    best = np.argmin(dist + penalty, axis=-1)
    filled = np.take_along_axis(a, best, axis=-1)
    return np.moveaxis(filled, -1, axis)


def _apply_axis(a: np.ndarray, idx: np.ndarray, w: np.ndarray, axis: int) -> np.ndarray:
    """Weighted 4-tap sum along ``axis``, written as the offset-0 tap plus weighted
    differences so that constant input is reproduced exactly."""
    a = np.moveaxis(a, axis, 0)
    g = a[idx]  # (n_tgt, 4, ...)
    base = g[:, 1]
    out = base + np.einsum("tk,tk...->t...", w, g - base[:, None])
    return np.moveaxis(out, 0, axis)


def _interp(data: np.ndarray, iy, wy, ix, wx) -> np.ndarray:
    if not np.isnan(data).any():
        return _apply_axis(_apply_axis(data, iy, wy, 0), ix, wx, 1)
    nb = data[iy[:, None, :, None], ix[None, :, None, :]]  # (ty, tx, 4 rows, 4 cols)
    nb = _fill_nearest(nb, axis=-1)
    nb = _fill_nearest(nb, axis=-2)
    base = nb[:, :, 1:2, 1:2]
    return base[:, :, 0, 0] + np.einsum("yr,xc,yxrc->yx", wy, wx, nb - base)


_KIND_RANGE = {
    RasterKind.EMISSION: (0.0, np.inf),
    RasterKind.LAI: (0.0, np.inf),
    RasterKind.PERCENTAGE: (0.0, 100.0),
}


def _clip_kind(data: np.ndarray, kind: RasterKind) -> np.ndarray:
    lo, hi = _KIND_RANGE[kind]
    return np.clip(data, lo, hi)


def _positions(centers: np.ndarray, start: float, cell: float) -> np.ndarray:
    return (centers - start) / cell - 0.5


def resample_bicubic(src: RasterGrid, target: GeoExtent) -> RasterGrid:
    """Cubic-convolution (a=-0.5) resampling of ``src`` onto the cell centres of ``target``.

    Boundary taps use half-sample reflection. A missing tap is replaced by the
    nearest non-missing tap in its kernel row (then column); a target cell whose
    whole 4x4 neighbourhood is missing stays missing. Results are clipped to the
    valid range of the raster kind, since cubic overshoot can leave it.
    """
    if src.kind is RasterKind.CLIMATE_CLASS:
        raise DataError("bicubic resampling of a categorical climate map; use align_to")
    if min(src.shape) < 4:
        raise DimensionMismatchError(f"bicubic resampling needs >= 4x4 cells, got {src.shape}")
    if not src.extent.contains(target):
        raise ExtentError("target extent is not inside the source extent")
    se = src.extent
    iy, wy = _taps(_positions(target.lat_centers(), se.lat_min, se.cell_size), se.nrows)
    ix, wx = _taps(_positions(target.lon_centers(), se.lon_min, se.cell_size), se.ncols)
    out = _interp(src.data, iy, wy, ix, wx)
    return RasterGrid(target, _clip_kind(out, src.kind), src.kind, src.timestamp)


@functools.lru_cache(maxsize=64)
def _resize_taps(n_src: int, n_tgt: int):
    pos = (np.arange(n_tgt) + 0.5) * (n_src / n_tgt) - 0.5
    idx, w = _taps(pos, n_src)
    return _readonly(idx), _readonly(w)


@functools.lru_cache(maxsize=64)
def resize_matrix(n_src: int, n_tgt: int) -> np.ndarray:
    """Dense 1-D bicubic operator mapping ``n_src`` cells onto ``n_tgt`` cells
    spanning the same interval (cell-centred registration)."""
    idx, w = _resize_taps(n_src, n_tgt)
    return _readonly(_dense(idx, w, n_src))


def bicubic_resize(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Resample a dense array (or a stack ``(..., H, W)``) to ``shape`` over the same bounds."""
    arr = np.asarray(arr, dtype=np.float64)
    iy, wy = _resize_taps(arr.shape[-2], shape[0])
    ix, wx = _resize_taps(arr.shape[-1], shape[1])
    return _apply_axis(_apply_axis(arr, iy, wy, arr.ndim - 2), ix, wx, arr.ndim - 1)


def downsample_array(arr: np.ndarray, factor: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[-2:]
    if factor < 2 or h % factor or w % factor:
        raise DimensionMismatchError(f"shape {(h, w)} is not divisible by factor {factor}")
    return bicubic_resize(arr, (h // factor, w // factor))


def upsample_array(arr: np.ndarray, factor: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[-2:]
    return bicubic_resize(arr, (h * factor, w * factor))


def downsample_bicubic(src: RasterGrid, factor: int) -> RasterGrid:
    """Bicubic downsampling by an integer factor onto the coarse cell centres."""
    if int(factor) != factor or factor < 2:
        raise ValueError("factor must be an integer >= 2")
    factor = int(factor)
    if src.shape[0] % factor or src.shape[1] % factor:
        raise DimensionMismatchError(f"grid {src.shape} is not divisible by {factor}")
    if min(src.shape) < 4:
        raise DimensionMismatchError(f"bicubic resampling needs >= 4x4 cells, got {src.shape}")
    if np.isnan(src.data).any():
        return resample_bicubic(src, src.extent.with_cell_size(src.extent.cell_size * factor))
    out = downsample_array(src.data, factor)
    target = src.extent.with_cell_size(src.extent.cell_size * factor)
    return RasterGrid(target, _clip_kind(out, src.kind), src.kind, src.timestamp)


def align_to(src: RasterGrid, reference: GeoExtent, method: str | None = None) -> RasterGrid:
    """Put ``src`` on the grid of ``reference``.

    When both grids share cell size and registration this is an exact crop
    (cells outside ``src`` become missing). Otherwise cells are interpolated at
    the reference cell centres: bicubic for continuous fields, nearest
    neighbour for climate classes (``method`` overrides). Reference cells whose
    centre falls outside ``src`` are missing.
    """
    se = src.extent
    if not se.overlaps(reference):
        raise ExtentError("source and reference extents do not overlap")
    if method is None:
        method = "nearest" if src.kind is RasterKind.CLIMATE_CLASS else "bicubic"
    out = np.full(reference.shape, np.nan)

    cs = se.cell_size
    dr = (reference.lat_min - se.lat_min) / cs
    dc = (reference.lon_min - se.lon_min) / cs
    registered = (
        abs(reference.cell_size - cs) <= EXTENT_TOL
        and abs(dr - round(dr)) < 1e-6
        and abs(dc - round(dc)) < 1e-6
    )
    if registered:
        dr, dc = round(dr), round(dc)
        r0, r1 = max(0, -dr), min(reference.nrows, se.nrows - dr)
        c0, c1 = max(0, -dc), min(reference.ncols, se.ncols - dc)
        out[r0:r1, c0:c1] = src.data[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        return RasterGrid(reference, out, src.kind, src.timestamp)

    lat = reference.lat_centers()
    lon = reference.lon_centers()
    rows = np.flatnonzero((lat > se.lat_min) & (lat < se.lat_max))
    cols = np.flatnonzero((lon > se.lon_min) & (lon < se.lon_max))
    if rows.size and cols.size:
        py = _positions(lat[rows], se.lat_min, cs)
        px = _positions(lon[cols], se.lon_min, cs)
        if method == "nearest":
            iy = np.clip(np.floor(py + 0.5).astype(int), 0, se.nrows - 1)
            ix = np.clip(np.floor(px + 0.5).astype(int), 0, se.ncols - 1)
            vals = src.data[np.ix_(iy, ix)]
        elif method == "bicubic":
            if min(se.shape) < 4:
                raise DimensionMismatchError("bicubic alignment needs >= 4x4 source cells")
            iy, wy = _taps(py, se.nrows)
            ix, wx = _taps(px, se.ncols)
            vals = _clip_kind(_interp(src.data, iy, wy, ix, wx), src.kind)
        else:
            raise ValueError(f"unknown alignment method {method!r}")
        out[np.ix_(rows, cols)] = vals
    return RasterGrid(reference, out, src.kind, src.timestamp)


def study_area_extent(cell_size: float = 0.1) -> GeoExtent:
    """Extent of the European isoprene inventory; the published bounds are
    cell centres (11.95W-44.95E, 34.05N-71.95N)."""
    h = cell_size / 2
    return GeoExtent(-11.95 - h, 44.95 + h, 34.05 - h, 71.95 + h, cell_size)


def grid_digest(grid: RasterGrid) -> str:
    import hashlib

    return hashlib.sha256(np.ascontiguousarray(grid.data).tobytes()).hexdigest()


def lat_lon_mesh(extent: GeoExtent) -> tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(extent.lat_centers(), extent.lon_centers(), indexing="ij")

