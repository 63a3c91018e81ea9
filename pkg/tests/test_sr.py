import numpy as np
import pytest
from conftest import gradient_check, make_grid, randomized_model

from bvocsr.errors import ConfigError, DataError, NumericalError
from bvocsr.patchset import build_patch, extract_patches
from bvocsr.raster import RasterKind
from bvocsr.sr import (
    BicubicBaseline,
    ConvModel,
    PlateauSchedule,
    SRInput,
    SyntheticSpec,
    TrainConfig,
    deploy,
    load_model,
    make_synthetic_dataset,
    parse_channels,
    save_model,
    sisr_vs_misr_experiment,
    super_resolve,
    train,
)
from bvocsr.sr.model import pixel_shuffle, pixel_unshuffle, upsample_skip
from bvocsr.sr.synthetic import nmse_gain_db
from bvocsr.transform import fit


def hr_lr_coordinate(n_hr, alpha):
    # LR cell-index coordinate of each HR centre
    return (np.arange(n_hr) + 0.5) / alpha - 0.5


def test_bicubic_constant():
    x = np.full((1, 2, 15, 15), 0.37)
    out = BicubicBaseline(2).predict(x)
    assert out.shape == (1, 30, 30)
    assert np.all(out == 0.37)


def test_bicubic_ramp_interior():
    i, j = np.mgrid[0:15, 0:15]
    lr = 0.1 + 0.02 * i + 0.03 * j
    out = super_resolve(BicubicBaseline(2), SRInput(lr[None]))
    u = hr_lr_coordinate(30, 2)
    want = 0.1 + 0.02 * u[:, None] + 0.03 * u[None, :]
    # interior: every tap of the 4-tap kernel lies inside the LR grid
    ok = (np.floor(u) - 1 >= 0) & (np.floor(u) + 2 <= 14)
    err = np.abs(out - want)[np.ix_(ok, ok)]
    assert ok.sum() == 24
    assert err.max() <= 1e-9


def test_zero_branch_equals_skip_path(rng):
    m = ConvModel(3, 2, features=8)
    for k in m.params:
        m.params[k][:] = 0.0
    x = rng.uniform(0.2, 0.8, size=(4, 3, 9, 9))
    np.testing.assert_array_equal(m.forward(x), upsample_skip(x[:, 0], 2))
    np.testing.assert_array_equal(m.predict(x), BicubicBaseline(2).predict(x))


def test_untrained_model_is_bicubic(rng):
    m = ConvModel(2)
    x = rng.uniform(size=(2, 2, 15, 15))
    np.testing.assert_array_equal(m.predict(x), BicubicBaseline(2).predict(x))


def test_output_shape_independent_of_channels(rng):
    for c in (1, 2, 3):
        m = randomized_model(c, 3, rng)
        x = rng.uniform(size=(2, c, 7, 11))
        out = m.predict(x)
        assert out.shape == (2, 14, 22)
        assert out.min() >= 0 and out.max() <= 1


def test_channel_mismatch(rng):
    m = ConvModel(2)
    with pytest.raises(DataError):
        m.predict(rng.uniform(size=(1, 3, 15, 15)))
    with pytest.raises(DataError):
        SRInput(np.full((1, 4, 4), 1.5))
    with pytest.raises(DataError):
        super_resolve(m, SRInput(rng.uniform(size=(2, 5, 5)), alpha=3))


def test_pixel_shuffle_roundtrip(rng):
    r = rng.normal(size=(2, 3, 4, 4))
    img = pixel_shuffle(r, 2)
    assert img[0, 1, 0] == r[0, 0, 0, 2]  # sub-pixel (1, 0) -> map 2
    np.testing.assert_array_equal(pixel_unshuffle(img, 2), r)


@pytest.mark.parametrize("n_layers", [2, 3])
def test_gradient_check(rng, n_layers):
    m = randomized_model(2, n_layers, rng)
    x = rng.uniform(size=(2, 2, 5, 5))
    y = rng.uniform(size=(2, 10, 10))
    assert gradient_check(m, x, y, rng) <= 1e-4


def realizable_task(rng, n=64):
    x = rng.uniform(0.2, 0.8, size=(n, 1, 8, 8))
    return x, upsample_skip(x[:, 0], 2)


def test_loss_decreases_on_realizable_task(rng):
    x, y = realizable_task(rng)
    m = randomized_model(1, 3, rng, features=8)
    m.params["w3"] *= 0.1
    res = train(m, (x, y), (x[:16], y[:16]), TrainConfig(max_epochs=5, batch_size=16))
    losses = [r["train_loss"] for r in res.history]
    assert len(losses) == 5
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert res.best_val_loss < res.initial_val_loss


def test_plateau_decay_is_exactly_tenfold():
    s = PlateauSchedule(1e-3, patience=10, factor=0.1, lr_min=1e-7)
    s.step(1.0)
    for _ in range(9):
        s.step(1.0)
        assert s.lr == 1e-3
    s.step(1.0)
    assert s.lr == 1e-3 * 0.1
    for _ in range(50):
        s.step(2.0)
    assert s.lr == 1e-7  # floored
    assert s.step(0.5) and s.since_best == 0


def test_early_stop_and_decay_in_training(rng):
    # target equals the skip path, so the untrained model is already optimal
    x, y = realizable_task(rng, n=8)
    m = ConvModel(1, 2, features=4)
    cfg = TrainConfig(lr0=1e-3, plateau_patience=2, early_stop_patience=5, max_epochs=100)
    res = train(m, (x, y), (x, y), cfg)
    assert res.stopped_early and len(res.history) == 6
    assert [r["lr"] for r in res.history] == pytest.approx([1e-3, 1e-3, 1e-3, 1e-4, 1e-4, 1e-5])
    assert res.best_epoch == 1


def test_nan_loss_aborts(rng):
    x, y = realizable_task(rng, n=8)
    y = y.copy()
    y[3, 0, 0] = np.nan
    with pytest.raises(NumericalError):
        train(ConvModel(1, 2, features=4), (x, y), (x[:2], y[:2] * 0), TrainConfig(max_epochs=2))


def test_training_is_bit_reproducible(rng):
    x, y = realizable_task(rng, n=40)
    y = y + 0.01 * np.sin(np.arange(16))[None, None, :]
    runs = []
    for _ in range(2):
        m = ConvModel(1, 2, features=4, seed=3)
        train(m, (x, y), (x[:8], y[:8]), TrainConfig(lr0=1e-3, max_epochs=3, batch_size=8, rng_seed=5))
        runs.append(b"".join(m.params[k].tobytes() for k in m.param_names))
    assert runs[0] == runs[1]


def test_train_config():
    cfg = TrainConfig()
    assert (cfg.lr0, cfg.beta2, cfg.plateau_patience, cfg.early_stop_patience, cfg.batch_size) == \
        (1e-4, 0.99, 10, 50, 32)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ConfigError):
        TrainConfig(lr0=-1.0)


def test_model_file_roundtrip(tmp_path, rng):
    m = randomized_model(3, 3, rng)
    t = fit(rng.lognormal(size=500), 50)
    save_model(tmp_path / "m.bin", m, ("cl", "tc"), t, extra={"note": 1})
    back, header = load_model(tmp_path / "m.bin")
    assert header["drivers"] == ["cl", "tc"] and header["extra"] == {"note": 1}
    assert header["transform"].quantile_grid.tobytes() == t.quantile_grid.tobytes()
    for k in m.param_names:
        assert back.params[k].tobytes() == m.params[k].tobytes()
    x = rng.uniform(size=(1, 3, 6, 6))
    np.testing.assert_array_equal(back.predict(x), m.predict(x))

    save_model(tmp_path / "b.bin", BicubicBaseline(2))
    b, hb = load_model(tmp_path / "b.bin")
    assert isinstance(b, BicubicBaseline) and hb["transform"] is None

    (tmp_path / "junk.bin").write_bytes(b"nope")
    with pytest.raises(DataError):
        load_model(tmp_path / "junk.bin")
    with pytest.raises(DataError):
        load_model(tmp_path / "missing.bin")
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-8])
    with pytest.raises(DataError):
        load_model(tmp_path / "cut.bin")


def test_deploy_in_emission_range(rng):
    emis = make_grid(rng.lognormal(size=(30, 30)) * 1e-11, kind=RasterKind.EMISSION)
    tc = make_grid(rng.uniform(0, 100, size=(30, 30)), kind=RasterKind.PERCENTAGE)
    t = fit(emis.data, 100)
    p = build_patch(next(extract_patches([emis])), {"tc": tc}, t)
    m = randomized_model(2, 3, rng)
    est = deploy(m, t, p, ("tc",))
    assert est.shape == (30, 30)
    assert est.min() >= t.quantile_grid[0] and est.max() <= t.quantile_grid[-1]


def test_parse_channels():
    assert parse_channels("isop") == ()
    assert parse_channels("isop, cl,tc") == ("cl", "tc")
    for bad in ("tc", "isop,foo", "isop,tc,tc", ""):
        with pytest.raises(ConfigError):
            parse_channels(bad)


def test_synthetic_dataset_properties():
    ds = make_synthetic_dataset(SyntheticSpec(n_train=20, n_val=5, n_test=5, seed=1))
    assert len(ds.train) == 20 and len(ds.val) == 5 and len(ds.test) == 5
    p = ds.train[0]
    assert p.t_hr.shape == (30, 30) and p.t_lr.shape == (15, 15)
    x = p.stacked_input(("cl", "tc"))
    assert x.shape == (3, 15, 15) and x.min() >= 0 and x.max() <= 1
    ctrl = make_synthetic_dataset(SyntheticSpec(n_train=20, n_val=5, n_test=5, seed=1, informative=False))
    assert np.all(ctrl.train[0].driver("tc") == 50.0)
    # the control shares the emission fields, only the drivers differ
    np.testing.assert_array_equal(ctrl.train[0].i_hr, p.i_hr)


def test_small_experiment_runs():
    spec = SyntheticSpec(n_train=64, n_val=16, n_test=16, seed=2)
    res = sisr_vs_misr_experiment(spec, TrainConfig(lr0=1e-3, max_epochs=2), configs=("isop,tc",),
                                  features=4)
    assert set(res.outcomes) == {"isop", "isop,tc"}
    assert res.nir("isop") == 0.0
    assert np.isfinite(res.bicubic_nmse_db)
    assert np.isfinite(nmse_gain_db(res, "isop,tc"))
    assert [r["channels"] for r in res.rows()] == ["isop", "isop,tc"]
