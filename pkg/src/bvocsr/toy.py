"""A small self-contained synthetic region for smoke-testing the full pipeline.

``make_toy(out_dir)`` writes, under ``out_dir``:

* ``emission/isoprene_<YYYY-MM>.nc``: monthly 0.1 deg emission maps with a sea
  corner (missing) and a bare patch of exact zeros,
* ``landcover.nc``: a 0.02 deg categorical map whose coarse cells are offset by
  half a 0.1 deg cell, so alignment needs interpolation,
* ``climate.nc``: four climate zones (Csa, Cfb, Dfb, Dfc) on a larger 0.1 deg grid,
* ``lai.nc``: monthly leaf area index,
* ``run.toml``: a run configuration for ``bvocsr run``.

The emission field is built from the land-cover fractions, so the tree-cover
and cropland drivers carry information about its fine structure.
"""

from __future__ import annotations

import datetime as dt
from pathlib import Path

import numpy as np

from .codes import KOPPEN_NAMES
from .raster import (
    CategoricalLandCover,
    GeoExtent,
    RasterGrid,
    RasterKind,
    align_to,
    coarsen,
    lat_lon_mesh,
    save_landcover,
    save_raster,
)

TOY_EXTENT = GeoExtent(0.0, 12.0, 40.0, 50.0, 0.1)
TOY_DATES = tuple(dt.date(2018, m, 1) for m in range(4, 10))
LC_CELL = 0.02
SEASON = (0.35, 0.6, 0.85, 1.0, 0.9, 0.55)
EMISSION_SCALE = 1e-11

TOY_CONFIG = """\
# Toy run configuration; relative paths are resolved against data_dir.
[paths]
data_dir = "{data_dir}"
out_dir = "{out_dir}"
emission_dir = "emission"
landcover = "landcover.nc"
climate = "climate.nc"
lai = "lai.nc"

[extract]
patch_deg = 3.0
stride_deg = 1.0
zero_threshold = 0.10
alpha = 2
n_quantiles = 1000

[folds]
rng_seed = 0
holdout_sample_size = 40
region = [6.5, 9.5, 42.5, 46.5]
train_fold = "Cfb"

[folds.classes]
Cfb = ["Cfb"]
Dfb = ["Dfb"]
Dfc = ["Dfc"]
Med = ["Csa"]

[train]
channels = "isop,tc"
lr0 = 1e-3
max_epochs = 30
batch_size = 32
rng_seed = 0

[evaluate]
domain = "both"
partition = "test_standard"

[stats]
driver = "tc"
bins = 32
"""


def _smooth(rng: np.random.Generator, lat: np.ndarray, lon: np.ndarray, n_waves: int = 5,
            max_freq: float = 0.4) -> np.ndarray:
    """Random smooth field in [0, 1]; frequencies in cycles per degree."""
    f = np.zeros(np.broadcast(lat, lon).shape)
    for _ in range(n_waves):
        ky, kx = rng.uniform(-max_freq, max_freq, size=2)
        f += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (ky * lat + kx * lon) + rng.uniform(0, 2 * np.pi))
    return (f - f.min()) / (f.max() - f.min())


def _sea(lat, lon):
    return (lat < 41.5) & (lon < 3.0)


def _bare(lat, lon):
    return (lat > 47.0) & (lat < 48.2) & (lon > 9.5) & (lon < 11.0)


def make_landcover(rng: np.random.Generator) -> CategoricalLandCover:
    # Coarse 0.1 deg cells of this map are centred on multiples of 0.1, i.e.
    # half a cell away from the emission grid centres.
    ext = GeoExtent(-0.95, 13.05, 38.95, 51.05, LC_CELL)
    lat, lon = lat_lon_mesh(ext)
    p_tree = 0.05 + 0.8 * _smooth(rng, lat, lon)
    p_crop = (1 - p_tree) * (0.1 + 0.8 * _smooth(rng, lat, lon))
    u = rng.uniform(size=ext.shape)
    lc = np.where(u < p_tree, 10, np.where(u < p_tree + p_crop, 40, 30)).astype(np.int32)
    lc[u > 0.97] = 50
    lc[_bare(lat, lon)] = 60
    lc[_sea(lat, lon)] = 80
    return CategoricalLandCover(ext, lc)


def make_climate() -> RasterGrid:
    ext = GeoExtent(-1.0, 13.0, 39.0, 51.0, 0.1)
    lat, lon = lat_lon_mesh(ext)
    code = np.full(ext.shape, KOPPEN_NAMES["Cfb"], dtype=np.float64)
    code[lat < 43.0] = KOPPEN_NAMES["Csa"]
    code[(lat >= 43.0) & (lon > 8.0)] = KOPPEN_NAMES["Dfb"]
    code[lat >= 47.5] = KOPPEN_NAMES["Dfc"]
    return RasterGrid(ext, code, RasterKind.CLIMATE_CLASS)


def make_emission(tc: np.ndarray, cl: np.ndarray, rng: np.random.Generator) -> list[RasterGrid]:
    """Monthly emission grids from tree-cover and cropland percentages on the toy grid."""
    lat, lon = lat_lon_mesh(TOY_EXTENT)
    climate_factor = 0.6 + 0.8 * _smooth(rng, lat, lon, n_waves=3, max_freq=0.15)
    out = []
    for date, season in zip(TOY_DATES, SEASON):
        weather = 0.8 + 0.4 * _smooth(rng, lat, lon, n_waves=3, max_freq=0.2)
        flux = EMISSION_SCALE * season * climate_factor * weather * (0.02 + tc / 100 + 0.15 * cl / 100)
        flux = np.where(_bare(lat, lon), 0.0, flux)
        flux = np.where(_sea(lat, lon), np.nan, flux)
        out.append(RasterGrid(TOY_EXTENT, flux, RasterKind.EMISSION, date))
    return out


def make_toy(out_dir, seed: int = 0, out_subdir: str = "run") -> dict[str, Path]:
    """Write the toy dataset and a matching run config; returns the written paths."""
    out = Path(out_dir)
    rng = np.random.Generator(np.random.Philox(seed))
    lc = make_landcover(rng)
    tc = align_to(coarsen(lc, 0.1, "fraction", cls=10), TOY_EXTENT)
    cl = align_to(coarsen(lc, 0.1, "fraction", cls=40), TOY_EXTENT)
    tc_data = np.nan_to_num(tc.data)
    cl_data = np.nan_to_num(cl.data)
    emission = make_emission(tc_data, cl_data, rng)

    lai = []
    for g, season in zip(emission, SEASON):
        v = np.clip(season * (0.3 + 5.5 * tc_data / 100 + 1.5 * cl_data / 100), 0.0, None)
        lai.append(RasterGrid(TOY_EXTENT, np.where(np.isnan(g.data), np.nan, v), RasterKind.LAI, g.timestamp))

    paths = {"landcover": out / "landcover.nc", "climate": out / "climate.nc",
             "lai": out / "lai.nc", "config": out / "run.toml"}
    save_landcover(lc, paths["landcover"])
    save_raster(make_climate(), paths["climate"], "climate")
    save_raster(lai, paths["lai"], "lai")
    for g in emission:
        p = out / "emission" / f"isoprene_{g.timestamp:%Y-%m}.nc"
        save_raster(g, p, "isoprene")
        paths[f"emission_{g.timestamp:%Y-%m}"] = p
    paths["config"].write_text(TOY_CONFIG.format(data_dir=out.resolve().as_posix(),
                                                 out_dir=(out / out_subdir).resolve().as_posix()))
    return paths
