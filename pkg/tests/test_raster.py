import datetime as dt

import numpy as np
import pytest
from conftest import make_grid
from scipy.io import netcdf_file

from bvocsr.errors import (
    DataError,
    DimensionMismatchError,
    ExtentError,
    MissingVariableError,
    NonUniformGridError,
)
from bvocsr.raster import (
    CategoricalLandCover,
    GeoExtent,
    RasterGrid,
    RasterKind,
    align_to,
    coarsen,
    cubic_kernel,
    downsample_bicubic,
    load_landcover,
    load_raster,
    load_raster_series,
    pack_array,
    reflect_index,
    resample_bicubic,
    save_landcover,
    save_raster,
    study_area_extent,
    unpack_array,
    upsample_array,
)


def write_nc(path, data, lat, lon, name="v", attrs=None, times=None, time_units=None):
    with netcdf_file(path, "w") as f:
        f.createDimension("lat", len(lat))
        f.createDimension("lon", len(lon))
        f.createVariable("lat", "f8", ("lat",))[:] = lat
        f.createVariable("lon", "f8", ("lon",))[:] = lon
        dims = ("lat", "lon")
        if times is not None:
            f.createDimension("time", len(times))
            t = f.createVariable("time", "f8", ("time",))
            t[:] = times
            t.units = time_units
            dims = ("time",) + dims
        v = f.createVariable(name, "f8", dims)
        v[:] = data
        for k, val in (attrs or {}).items():
            setattr(v, k, val)


# --- extents -----------------------------------------------------------------

def test_extent_validation():
    with pytest.raises(ExtentError):
        GeoExtent(1.0, 0.0, 0.0, 1.0, 0.1)
    with pytest.raises(ExtentError):
        GeoExtent(0.0, 1.05, 0.0, 1.0, 0.1)
    e = GeoExtent(0.0, 3.0, 40.0, 42.0, 0.1)
    assert e.shape == (20, 30)
    np.testing.assert_allclose(e.lat_centers()[[0, -1]], [40.05, 41.95])


def test_study_area_grid_from_published_bounds():
    # The published bounds are read as outermost cell centres.
    e = study_area_extent()
    assert e.shape == (380, 570)
    np.testing.assert_allclose(e.lon_centers()[[0, -1]], [-11.95, 44.95], atol=1e-9)
    np.testing.assert_allclose(e.lat_centers()[[0, -1]], [34.05, 71.95], atol=1e-9)


def test_window_extent():
    e = GeoExtent(0.0, 6.0, 40.0, 46.0, 0.1)
    w = e.window(10, 20, 30, 30)
    assert (w.lon_min, w.lat_min, w.lon_max, w.lat_max) == (2.0, 41.0, 5.0, 44.0)


def test_grid_kind_invariants():
    with pytest.raises(DataError):
        make_grid([[1.0, 101.0], [0.0, 0.0]], kind=RasterKind.PERCENTAGE)
    with pytest.raises(DataError):
        make_grid([[-1.0, 1.0], [0.0, 0.0]])
    with pytest.raises(DataError):
        make_grid([[15.0, 99.0], [15.0, 15.0]], kind=RasterKind.CLIMATE_CLASS)
    with pytest.raises(DimensionMismatchError):
        RasterGrid(GeoExtent(0, 1, 0, 1, 0.5), np.zeros((3, 2)))
    with pytest.raises(DataError):
        CategoricalLandCover(GeoExtent(0, 1, 0, 1, 0.5), np.array([[10, 11], [20, 30]]))


# --- NetCDF I/O --------------------------------------------------------------

def test_load_two_by_two(tmp_path):
    p = tmp_path / "a.nc"
    write_nc(p, [[1.0, 2.0], [3.0, 4.0]], [45.05, 45.15], [10.05, 10.15])
    g = load_raster(p, "v")
    np.testing.assert_array_equal(g.data, [[1, 2], [3, 4]])
    assert g.extent == GeoExtent(10.0, 10.2, 45.0, 45.2, 0.1)


def test_load_flips_descending_latitude(tmp_path):
    p = tmp_path / "a.nc"
    write_nc(p, [[3.0, 4.0], [1.0, 2.0]], [45.15, 45.05], [10.05, 10.15])
    np.testing.assert_array_equal(load_raster(p, "v").data, [[1, 2], [3, 4]])


def test_load_irregular_spacing(tmp_path):
    p = tmp_path / "a.nc"
    write_nc(p, np.ones((3, 2)), [0.1, 0.2, 0.35], [0.05, 0.15])
    with pytest.raises(NonUniformGridError):
        load_raster(p, "v")


def test_load_errors(tmp_path):
    p = tmp_path / "a.nc"
    write_nc(p, np.ones((2, 2)), [0.05, 0.15], [0.05, 0.15])
    with pytest.raises(MissingVariableError):
        load_raster(p, "nope")
    with pytest.raises(DataError):
        load_raster(tmp_path / "missing.nc", "v")
    with pytest.raises(DataError):
        (tmp_path / "junk.nc").write_bytes(b"not a netcdf file")
        load_raster(tmp_path / "junk.nc", "v")


def test_missing_coordinate_and_bad_dims(tmp_path):
    p = tmp_path / "nocoord.nc"
    with netcdf_file(p, "w") as f:
        f.createDimension("y", 2)
        f.createDimension("x", 2)
        f.createVariable("v", "f8", ("y", "x"))[:] = np.ones((2, 2))
    with pytest.raises(MissingVariableError):
        load_raster(p, "v")
    q = tmp_path / "swapped.nc"
    with netcdf_file(q, "w") as f:
        f.createDimension("lat", 2)
        f.createDimension("lon", 3)
        f.createVariable("lat", "f8", ("lat",))[:] = [0.05, 0.15]
        f.createVariable("lon", "f8", ("lon",))[:] = [0.05, 0.15, 0.25]
        f.createVariable("v", "f8", ("lon", "lat"))[:] = np.ones((3, 2))
    with pytest.raises(DimensionMismatchError):
        load_raster(q, "v")


def test_missing_value_and_scaling(tmp_path):
    p = tmp_path / "a.nc"
    raw = np.array([[-9999.0, 2.0], [3.0, 5.0]])
    write_nc(p, raw, [0.05, 0.15], [0.05, 0.15],
             attrs={"_FillValue": -9999.0, "scale_factor": 2.0, "add_offset": 1.0})
    g = load_raster(p, "v")
    assert np.isnan(g.data[0, 0])
    np.testing.assert_array_equal(g.data[1], [7.0, 11.0])
    q = tmp_path / "b.nc"
    write_nc(q, np.array([[0.0, -1.0], [1.0, 2.0]]), [0.05, 0.15], [0.05, 0.15], name="w")
    assert np.isnan(load_raster(q, "w", missing_value=-1.0).data[0, 1])


def test_time_series_roundtrip(tmp_path):
    grids = [make_grid(np.full((4, 5), float(i)), date=dt.date(2018, 6 + i, 1)) for i in range(3)]
    p = tmp_path / "s.nc"
    save_raster(grids, p, "isoprene")
    back = load_raster_series(p, "isoprene")
    assert [g.timestamp for g in back] == [g.timestamp for g in grids]
    for a, b in zip(grids, back):
        np.testing.assert_array_equal(a.data, b.data)
        assert a.extent.same_grid(b.extent)
    assert load_raster(p, "isoprene", time_index=1).data[0, 0] == 1.0
    with pytest.raises(DimensionMismatchError):
        load_raster(p, "isoprene")


def test_time_units_hours(tmp_path):
    p = tmp_path / "t.nc"
    write_nc(p, np.ones((1, 2, 2)), [0.05, 0.15], [0.05, 0.15], times=[48.0],
             time_units="hours since 2000-01-01 00:00:00")
    assert load_raster(p, "v").timestamp == dt.date(2000, 1, 3)


def test_save_load_nan_and_kind(tmp_path):
    g = make_grid([[np.nan, 50.0], [100.0, 0.0]], kind=RasterKind.PERCENTAGE)
    p = tmp_path / "pct.nc"
    save_raster(g, p, "tc")
    back = load_raster(p, "tc")
    assert back.kind is RasterKind.PERCENTAGE
    np.testing.assert_array_equal(np.isnan(back.data), np.isnan(g.data))
    np.testing.assert_array_equal(back.data[~np.isnan(back.data)], [50.0, 100.0, 0.0])


def test_hdf5_backend(tmp_path):
    h5py = pytest.importorskip("h5py")
    p = tmp_path / "nc4.nc"
    with h5py.File(p, "w") as f:
        lat = f.create_dataset("lat", data=[45.05, 45.15, 45.25])
        lon = f.create_dataset("lon", data=[10.05, 10.15])
        lat.make_scale("lat")
        lon.make_scale("lon")
        v = f.create_dataset("isoprene", data=np.arange(6.0).reshape(3, 2))
        v.attrs["_FillValue"] = 5.0
        v.dims[0].attach_scale(lat)
        v.dims[1].attach_scale(lon)
    g = load_raster(p, "isoprene")
    assert g.shape == (3, 2)
    assert np.isnan(g.data[2, 1])
    assert g.data[1, 0] == 2.0


def test_landcover_roundtrip(tmp_path, rng):
    codes = np.array([10, 20, 30, 40, 0])
    lc = CategoricalLandCover(GeoExtent(0, 0.8, 0, 0.6, 0.1), rng.choice(codes, size=(6, 8)))
    p = tmp_path / "lc.nc"
    save_landcover(lc, p)
    np.testing.assert_array_equal(load_landcover(p).data, lc.data)


def test_binary_record_roundtrip(rng):
    a = rng.normal(size=(7, 5))
    a[0, 0] = np.nan
    buf = pack_array(a, 0.1) + pack_array(a[:2], 0.2)
    assert len(buf) == 2 * 32 + 8 * (35 + 10)
    assert buf[:4] == b"BSRK"
    b, cs, off = unpack_array(buf, 0)
    assert cs == 0.1 and off == 32 + 280
    np.testing.assert_array_equal(b.view(np.uint64), a.view(np.uint64))
    c, cs2, end = unpack_array(buf, off)
    assert cs2 == 0.2 and end == len(buf) and c.shape == (2, 5)
    with pytest.raises(DataError):
        unpack_array(b"XXXX" + buf[4:], 0)


# --- coarsening --------------------------------------------------------------

def test_coarsen_constant():
    out = coarsen(make_grid(np.ones((4, 4))), 0.2)
    assert out.shape == (2, 2)
    np.testing.assert_array_equal(out.data, 1.0)


def test_coarsen_mean_ignores_missing():
    g = make_grid([[1.0, np.nan], [3.0, np.nan]], cell=0.5)
    assert coarsen(g, 1.0).data[0, 0] == 2.0
    g = make_grid([[np.nan, np.nan], [np.nan, np.nan]], cell=0.5)
    assert np.isnan(coarsen(g, 1.0).data[0, 0])


def test_coarsen_preserves_global_mean(rng):
    g = make_grid(rng.uniform(0, 10, size=(12, 18)))
    out = coarsen(g, 0.3)
    assert abs(out.data.mean() - g.data.mean()) <= 1e-12 * g.data.mean()


def test_class_fraction_half():
    lc = CategoricalLandCover(GeoExtent(0, 0.2, 0, 0.2, 0.1), np.array([[10, 10], [40, 40]]))
    out = coarsen(lc, 0.2, "fraction", cls=10)
    assert out.kind is RasterKind.PERCENTAGE
    assert out.data[0, 0] == 50.0


def test_class_fraction_matches_block_count(rng):
    codes = [10, 20, 30, 40, 50, 0]
    data = rng.choice(codes, size=(8, 8))
    lc = CategoricalLandCover(GeoExtent(0, 0.8, 0, 0.8, 0.1), data)
    for c in (10, 40):
        got = coarsen(lc, 0.4, "fraction", cls=c).data
        want = np.full((2, 2), np.nan)
        for bi in range(2):
            for bj in range(2):
                hit = valid = 0
                for i in range(4 * bi, 4 * bi + 4):
                    for j in range(4 * bj, 4 * bj + 4):
                        if data[i, j] != 0:
                            valid += 1
                            hit += data[i, j] == c
                if valid:
                    want[bi, bj] = 100.0 * hit / valid
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_class_fractions_sum_to_100(rng):
    from bvocsr.codes import WORLDCOVER_CLASSES

    codes = list(WORLDCOVER_CLASSES)
    lc = CategoricalLandCover(GeoExtent(0, 1.0, 0, 1.0, 0.05), rng.choice(codes, size=(20, 20)))
    total = sum(coarsen(lc, 0.25, "fraction", cls=c).data for c in codes)
    np.testing.assert_allclose(total, 100.0, atol=1e-9)


def test_coarsen_errors():
    g = make_grid(np.ones((4, 4)))
    with pytest.raises(ExtentError):
        coarsen(g, 0.15)
    with pytest.raises(ExtentError):
        coarsen(g, 0.3)


def test_coarsen_chunked_equals_unchunked(rng):
    codes = [10, 40, 80]
    lc = CategoricalLandCover(GeoExtent(0, 2.0, 0, 2.0, 0.05), rng.choice(codes, size=(40, 40)))
    a = coarsen(lc, 0.1, "fraction", cls=10, chunk_rows=3).data
    b = coarsen(lc, 0.1, "fraction", cls=10).data
    np.testing.assert_array_equal(a, b)


# --- bicubic -----------------------------------------------------------------

def keys_kernel(s):
    # a = -0.5 written out term by term
    s = abs(s)
    if s <= 1:
        return 1.5 * s ** 3 - 2.5 * s ** 2 + 1
    if s < 2:
        return -0.5 * s ** 3 + 2.5 * s ** 2 - 4 * s + 2
    return 0.0


def test_kernel_formula():
    for s in np.linspace(-2.5, 2.5, 101):
        assert cubic_kernel(s) == pytest.approx(keys_kernel(s), abs=1e-15)
    assert cubic_kernel(0.0) == 1.0
    assert cubic_kernel(1.0) == 0.0


def test_reflect_index():
    np.testing.assert_array_equal(reflect_index(np.array([-2, -1, 0, 3, 4, 5]), 4), [1, 0, 0, 3, 3, 2])


def test_resample_constant_exact():
    g = make_grid(np.full((6, 8), 3.25))
    out = resample_bicubic(g, GeoExtent(0.0, 0.8, 40.0, 40.6, 0.05))
    np.testing.assert_array_equal(out.data, 3.25)


def test_resample_ramp_interior():
    n = 8
    y, x = np.mgrid[0:n, 0:n].astype(float)
    g = make_grid(1.0 + x + y)
    out = resample_bicubic(g, GeoExtent(0.0, 0.8, 40.0, 40.8, 0.05))
    # source index coordinates of the target centres
    p = (np.arange(16) + 0.5) / 2 - 0.5
    want = 1.0 + p[None, :] + p[:, None]
    interior = (p >= 1) & (p < n - 2)
    err = np.abs(out.data - want)[np.ix_(interior, interior)]
    assert err.max() <= 1e-9


def test_resample_matches_hand_kernel_sum(rng):
    data = rng.uniform(0, 1, size=(6, 6))
    g = make_grid(data, cell=1.0, lon0=0.0, lat0=0.0)
    # one target cell of size 0.5 centred at lon 2.35, lat 3.1 in source index units
    tgt = GeoExtent(2.1, 2.6, 2.85, 3.35, 0.5)
    got = resample_bicubic(g, tgt).data[0, 0]
    py, px = 3.1 - 0.5, 2.35 - 0.5
    want = 0.0
    for i in range(int(np.floor(py)) - 1, int(np.floor(py)) + 3):
        for j in range(int(np.floor(px)) - 1, int(np.floor(px)) + 3):
            want += keys_kernel(py - i) * keys_kernel(px - j) * data[i, j]
    assert got == pytest.approx(want, abs=1e-12)


def test_resample_preconditions():
    g = make_grid(np.ones((3, 6)))
    with pytest.raises(DimensionMismatchError):
        resample_bicubic(g, g.extent)
    g = make_grid(np.ones((6, 6)))
    with pytest.raises(ExtentError):
        resample_bicubic(g, GeoExtent(0.0, 1.0, 40.0, 40.5, 0.05))


def test_missing_taps_use_nearest_in_row():
    data = np.arange(36, dtype=float).reshape(6, 6) + 1
    data[2, 2] = np.nan
    g = make_grid(data, cell=1.0, lon0=0.0, lat0=0.0)
    tgt = GeoExtent(2.0, 3.0, 2.0, 3.0, 1.0)  # centre cell (2, 2) itself
    filled = data.copy()
    filled[2, 2] = data[2, 1]  # nearest non-missing in the row, tie to the lower index
    want = sum(keys_kernel(2 - i) * keys_kernel(2 - j) * filled[i, j]
               for i in range(1, 5) for j in range(1, 5))
    assert resample_bicubic(g, tgt).data[0, 0] == pytest.approx(want, abs=1e-12)


def test_all_missing_neighbourhood_stays_missing():
    data = np.ones((8, 8))
    data[:5, :5] = np.nan
    g = make_grid(data, cell=1.0, lon0=0.0, lat0=0.0)
    out = resample_bicubic(g, GeoExtent(1.0, 2.0, 1.0, 2.0, 1.0))
    assert np.isnan(out.data[0, 0])


def test_downsample_constant_and_ramp():
    c = make_grid(np.full((30, 30), 2.0))
    np.testing.assert_array_equal(downsample_bicubic(c, 2).data, 2.0)
    y, x = np.mgrid[0:30, 0:30].astype(float)
    r = downsample_bicubic(make_grid(5.0 + 0.3 * x + 0.1 * y), 2)
    assert r.shape == (15, 15)
    p = 2 * np.arange(15) + 0.5
    want = 5.0 + 0.3 * p[None, :] + 0.1 * p[:, None]
    np.testing.assert_allclose(r.data[1:-1, 1:-1], want[1:-1, 1:-1], atol=1e-9)


def test_downsample_equals_resample(rng):
    g = make_grid(rng.uniform(0, 1, size=(30, 30)))
    a = downsample_bicubic(g, 2)
    b = resample_bicubic(g, g.extent.with_cell_size(0.2))
    np.testing.assert_allclose(a.data, b.data, atol=1e-13)


def test_downsample_not_divisible():
    with pytest.raises(DimensionMismatchError):
        downsample_bicubic(make_grid(np.ones((31, 30))), 2)


def test_band_limited_roundtrip(rng):
    n = 60
    y, x = np.mgrid[0:n, 0:n] / n
    f = 2.0
    for _ in range(3):
        kx, ky = rng.uniform(-2, 2, size=2)
        f = f + rng.uniform(0.2, 0.5) * np.sin(2 * np.pi * (kx * x + ky * y) + rng.uniform(0, 6))
    lr = downsample_bicubic(make_grid(f), 2)
    back = upsample_array(lr.data, 2)
    rel = np.sqrt(np.mean((back - f) ** 2)) / np.sqrt(np.mean(f ** 2))
    assert rel <= 0.05


def test_align_registered_crop():
    big = make_grid(np.arange(100.0).reshape(10, 10), lon0=0.0, lat0=40.0)
    ref = GeoExtent(0.2, 0.5, 40.3, 40.6, 0.1)
    out = align_to(big, ref)
    np.testing.assert_array_equal(out.data, big.data[3:6, 2:5])


def test_align_offset_uses_bicubic():
    y, x = np.mgrid[0:12, 0:12].astype(float)
    src = make_grid(1.0 + x, lon0=-0.05, lat0=39.95)  # half a cell offset
    ref = GeoExtent(0.3, 0.8, 40.3, 40.8, 0.1)
    out = align_to(src, ref)
    # lon centre 0.35 sits at source index (0.35 + 0.05) / 0.1 - 0.5 = 3.5
    want = 1.0 + (np.arange(5) + 3.5)
    np.testing.assert_allclose(out.data[0], want, atol=1e-9)


def test_align_climate_nearest():
    codes = np.array([[8.0, 15.0], [26.0, 27.0]])
    src = make_grid(np.kron(codes, np.ones((5, 5))), lon0=-0.05, lat0=39.95,
                    kind=RasterKind.CLIMATE_CLASS)
    out = align_to(src, GeoExtent(0.0, 0.9, 40.0, 0.9 + 40.0, 0.1))
    assert set(np.unique(out.data[~np.isnan(out.data)])) <= {8.0, 15.0, 26.0, 27.0}


def test_align_no_overlap():
    with pytest.raises(ExtentError):
        align_to(make_grid(np.ones((4, 4))), GeoExtent(10, 11, 10, 11, 0.1))
