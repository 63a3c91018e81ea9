"""Patch extraction, LR/driver generation and the on-disk patch store.

A store directory holds ``index.jsonl`` (one entry per patch) and
``patches.bin``, where each patch is a run of raw binary records
``[i_hr][i_lr][t_hr][t_lr][driver_1]...[driver_D]``.
"""

from __future__ import annotations

import datetime as dt
import json
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codes import CLIMATE_NODATA, climate_name
from .errors import DataError, DimensionMismatchError, ExtentError
from .raster import (
    GeoExtent,
    RasterGrid,
    RasterKind,
    downsample_array,
    pack_array,
    unpack_array,
)
from .transform import TransformModel

INDEX_FILE = "index.jsonl"
STORE_FILE = "patches.bin"

# Fixed divisors bringing each driver onto [0, 1] before stacking.
DRIVER_SCALES = {"cl": 100.0, "tc": 100.0, "lai": 7.2}
DRIVER_KINDS = {"cl": RasterKind.PERCENTAGE, "tc": RasterKind.PERCENTAGE, "lai": RasterKind.LAI}


@dataclass(frozen=True)
class Window:
    """A retained HR window of one emission grid."""

    row: int
    col: int
    date: dt.date | None
    extent: GeoExtent
    grid_extent: GeoExtent  # extent of the emission grid the window was cut from
    data: np.ndarray = field(repr=False, compare=False)
    zero_fraction: float = 0.0


@dataclass
class PatchIndexEntry:
    patch_id: int
    extent: GeoExtent
    date: dt.date | None
    climate_class: int
    zero_fraction: float
    store_offset: int = -1
    row: int = 0
    col: int = 0
    drivers: tuple[str, ...] = ()
    alpha: int = 2

    @property
    def center(self) -> tuple[float, float]:
        return self.extent.center

    def to_json(self) -> str:
        return json.dumps({
            "patch_id": self.patch_id,
            "extent": self.extent.to_dict(),
            "date": self.date.isoformat() if self.date else None,
            "climate_class": self.climate_class,
            "climate_name": climate_name(self.climate_class),
            "zero_fraction": self.zero_fraction,
            "store_offset": self.store_offset,
            "row": self.row,
            "col": self.col,
            "drivers": list(self.drivers),
            "alpha": self.alpha,
        })

    @classmethod
    def from_json(cls, line: str) -> "PatchIndexEntry":
        d = json.loads(line)
        return cls(
            patch_id=int(d["patch_id"]),
            extent=GeoExtent.from_dict(d["extent"]),
            date=dt.date.fromisoformat(d["date"]) if d["date"] else None,
            climate_class=int(d["climate_class"]),
            zero_fraction=float(d["zero_fraction"]),
            store_offset=int(d["store_offset"]),
            row=int(d.get("row", 0)),
            col=int(d.get("col", 0)),
            drivers=tuple(d.get("drivers", ())),
            alpha=int(d.get("alpha", 2)),
        )


@dataclass(eq=False)
class Patch:
    i_hr: np.ndarray
    i_lr: np.ndarray
    t_hr: np.ndarray
    t_lr: np.ndarray
    drivers_lr: list[np.ndarray]
    meta: PatchIndexEntry

    @property
    def driver_names(self) -> tuple[str, ...]:
        return self.meta.drivers

    def driver(self, name: str) -> np.ndarray:
        try:
            return self.drivers_lr[self.meta.drivers.index(name)]
        except ValueError:
            raise DataError(f"patch {self.meta.patch_id} has no driver {name!r}") from None

    def stacked_input(self, drivers: Sequence[str] = ()) -> np.ndarray:
        """``(1 + D, H, W)`` network input: T_LR followed by drivers scaled to [0, 1]."""
        chans = [self.t_lr]
        for name in drivers:
            scale = DRIVER_SCALES.get(name, 1.0)
            chans.append(np.clip(self.driver(name) / scale, 0.0, 1.0))
        return np.stack(chans)

    def arrays(self) -> list[np.ndarray]:
        return [self.i_hr, self.i_lr, self.t_hr, self.t_lr, *self.drivers_lr]


def _cells(deg: float, cell: float, what: str) -> int:
    n = round(deg / cell)
    if n < 1 or abs(n * cell - deg) > 1e-9:
        raise ExtentError(f"{what} {deg} deg is not a multiple of the {cell} deg cell size")
    return n


def window_origins(n: int, size: int, stride: int) -> range:
    """Origins of full windows along one axis; partial windows at the far edge are dropped."""
    if size > n:
        raise DimensionMismatchError(f"patch of {size} cells does not fit an axis of {n}")
    return range(0, n - size + 1, stride)


def extract_patches(emission: Sequence[RasterGrid], patch_deg: float = 3.0,
                    stride_deg: float = 1.0, zero_threshold: float = 0.10) -> Iterator[Window]:
    """Slide a square window over each emission grid and yield the usable ones.

    A window is dropped when its fraction of exact zeros is strictly greater
    than ``zero_threshold`` or when it contains any missing cell. Windows come
    out in row-major spatial order, and for each location in date order.
    """
    grids = list(emission)
    if not grids:
        return
    ext = grids[0].extent
    for g in grids[1:]:
        if not g.extent.same_grid(ext):
            raise ExtentError("emission grids do not share one extent")
    size = _cells(patch_deg, ext.cell_size, "patch size")
    stride = _cells(stride_deg, ext.cell_size, "stride")
    rows = window_origins(ext.nrows, size, stride)
    cols = window_origins(ext.ncols, size, stride)
    order = sorted(range(len(grids)), key=lambda i: (grids[i].timestamp or dt.date.min, i))
    n = size * size
    for r in rows:
        for c in cols:
            wext = None
            for i in order:
                block = grids[i].data[r:r + size, c:c + size]
                if np.isnan(block).any():
                    continue
                zf = np.count_nonzero(block == 0.0) / n
                if zf > zero_threshold:
                    continue
                if wext is None:
                    wext = ext.window(r, c, size, size)
                yield Window(r, c, grids[i].timestamp, wext, ext, np.array(block), zf)


def dominant_class(block: np.ndarray) -> int:
    """Most frequent climate code in ``block`` (ties -> lowest code; 0 if all missing)."""
    vals = block[~np.isnan(block)].astype(np.int64)
    vals = vals[vals != CLIMATE_NODATA]
    if vals.size == 0:
        return CLIMATE_NODATA
    codes, counts = np.unique(vals, return_counts=True)
    return int(codes[np.argmax(counts)])


def _check_aligned(name: str, grid: RasterGrid, ext: GeoExtent):
    if not grid.extent.same_grid(ext):
        raise ExtentError(f"driver {name!r} is not aligned to the emission grid")


def build_patch(window: Window, drivers: Mapping[str, RasterGrid], transform: TransformModel,
                alpha: int = 2, climate: RasterGrid | None = None, patch_id: int = 0) -> Patch:
    """Turn a window into a full HR/LR sample.

    ``drivers`` maps driver names to grids on the same grid as the emission
    map the window came from. The LR emission is the bicubic
    downsample clipped at zero; missing driver cells are read as 0.
    """
    i_hr = np.asarray(window.data, dtype=np.float64)
    size = i_hr.shape[0]
    grid_extent = window.grid_extent
    sl = np.s_[window.row:window.row + size, window.col:window.col + size]
    i_lr = np.maximum(downsample_array(i_hr, alpha), 0.0)

    names = tuple(drivers)
    drivers_lr = []
    for name in names:
        grid = drivers[name]
        _check_aligned(name, grid, grid_extent)
        hr = np.nan_to_num(grid.data[sl], nan=0.0)
        lr = downsample_array(hr, alpha)
        if grid.kind is RasterKind.PERCENTAGE:
            lr = np.clip(lr, 0.0, 100.0)
        else:
            lr = np.maximum(lr, 0.0)
        drivers_lr.append(lr)

    cc = CLIMATE_NODATA
    if climate is not None:
        _check_aligned("climate", climate, grid_extent)
        cc = dominant_class(climate.data[sl])

    meta = PatchIndexEntry(
        patch_id=patch_id,
        extent=window.extent,
        date=window.date,
        climate_class=cc,
        zero_fraction=window.zero_fraction,
        row=window.row,
        col=window.col,
        drivers=names,
        alpha=alpha,
    )
    return Patch(i_hr, i_lr, np.asarray(transform.forward(i_hr)),
                 np.asarray(transform.forward(i_lr)), drivers_lr, meta)


# ---------------------------------------------------------------------------
# Store

def write_store(patches: Iterable[Patch], out_dir) -> list[PatchIndexEntry]:
    """Write patches to ``out_dir``; fills in each entry's ``store_offset``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(out / STORE_FILE, "wb") as fb, open(out / INDEX_FILE, "w") as fi:
        for p in patches:
            hr_cell = p.meta.extent.cell_size
            lr_cell = hr_cell * p.meta.alpha
            cells = [hr_cell, lr_cell, hr_cell, lr_cell] + [lr_cell] * len(p.drivers_lr)
            if len(p.drivers_lr) != len(p.meta.drivers):
                raise DataError("driver arrays and driver names disagree")
            p.meta.store_offset = offset
            for arr, cs in zip(p.arrays(), cells):
                rec = pack_array(arr, cs)
                fb.write(rec)
                offset += len(rec)
            fi.write(p.meta.to_json() + "\n")
            entries.append(p.meta)
    return entries


def read_index(store_dir) -> list[PatchIndexEntry]:
    path = Path(store_dir) / INDEX_FILE
    if not path.exists():
        raise DataError(f"no patch index at {path}")
    with open(path) as fh:
        return [PatchIndexEntry.from_json(line) for line in fh if line.strip()]


class PatchStore:
    """Random access to a store directory; the binary file is read once."""

    def __init__(self, store_dir):
        self.path = Path(store_dir)
        self.index = read_index(self.path)
        self._by_id = {e.patch_id: e for e in self.index}
        bin_path = self.path / STORE_FILE
        if not bin_path.exists():
            raise DataError(f"no patch store at {bin_path}")
        self._buf = bin_path.read_bytes()

    def __len__(self) -> int:
        return len(self.index)

    def ids(self) -> list[int]:
        return [e.patch_id for e in self.index]

    def entry(self, patch_id: int) -> PatchIndexEntry:
        try:
            return self._by_id[patch_id]
        except KeyError:
            raise DataError(f"patch {patch_id} not in store {self.path}") from None

    def get(self, patch_id: int) -> Patch:
        meta = self.entry(patch_id)
        off = meta.store_offset
        arrays = []
        for _ in range(4 + len(meta.drivers)):
            arr, _, off = unpack_array(self._buf, off)
            arrays.append(arr)
        i_hr, i_lr, t_hr, t_lr, *drv = arrays
        return Patch(i_hr, i_lr, t_hr, t_lr, drv, meta)

    def load(self, ids: Iterable[int] | None = None) -> list[Patch]:
        return [self.get(i) for i in (self.ids() if ids is None else ids)]


def read_store(store_dir) -> list[Patch]:
    return PatchStore(store_dir).load()
