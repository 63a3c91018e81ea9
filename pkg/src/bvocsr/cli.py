"""Command-line entry point.

Subcommands mirror the pipeline stages::

    make-toy -> preprocess -> extract-patches -> build-folds -> analyze-stats
             -> train -> deploy -> evaluate -> report

``run`` chains all stages from one TOML run config. Every subcommand accepts
``--config FILE``; flags given on the command line override config values.
Relative paths taken from a config file are resolved against the data
directory: ``[paths] data_dir``, else ``$BVOCSR_DATA_DIR``, else the config
file's own directory.

Each stage writes a JSON log next to its output recording package versions,
seeds and SHA-256 digests of its inputs. Exit codes: 0 success, 1
configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

from . import __version__
from .errors import BVOCSRError, ConfigError, DataError

# numpy and friends are imported lazily so ``--threads`` can still cap the
# BLAS/OpenMP pools, which read these variables once at import time.
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
DATA_DIR_ENV = "BVOCSR_DATA_DIR"
DRIVER_FILES = {"cl": "cl.nc", "tc": "tc.nc", "lai": "lai.nc"}
CLIMATE_FILE = "climate.nc"
TRANSFORM_FILE = "transform.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse would exit with status 2, which is reserved for data errors.
        raise ConfigError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config handling

class Settings:
    """Command-line flags layered over one section of the run config."""

    def __init__(self, args: argparse.Namespace, config: dict, config_path: Path | None):
        self.args = args
        self.config = config
        self.config_path = config_path
        paths = config.get("paths", {})
        base = paths.get("data_dir") or os.environ.get(DATA_DIR_ENV)
        if base is None and config_path is not None:
            base = config_path.parent
        self.data_dir = Path(base) if base is not None else None

    def get(self, section: str, key: str, default=None, flag: str | None = None):
        v = getattr(self.args, flag or key, None)
        if v is not None:
            return v
        return self.config.get(section, {}).get(key, default)

    def path(self, section: str, key: str, flag: str | None = None, required: bool = True):
        """A path from the flag (relative to cwd) or the config (relative to the data dir)."""
        v = getattr(self.args, flag or key, None)
        if v is not None:
            return Path(v)
        v = self.config.get(section, {}).get(key)
        if v in (None, ""):
            if required:
                raise ConfigError(f"missing required path --{(flag or key).replace('_', '-')}")
            return None
        p = Path(v)
        if not p.is_absolute() and self.data_dir is not None:
            p = self.data_dir / p
        return p


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text()
    if p.suffix == ".json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None


def _settings(args) -> Settings:
    cfg_path = Path(args.config) if getattr(args, "config", None) else None
    cfg = load_config(cfg_path) if cfg_path else {}
    return Settings(args, cfg, cfg_path)


# ---------------------------------------------------------------------------
# logging of provenance

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digests(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file() and not q.name.endswith(".log.json")) \
            if p.is_dir() else [p]
        for f in files:
            if f.exists():
                out[str(f)] = sha256_file(f)
    return out


def _versions() -> dict[str, str]:
    import numpy
    import scipy

    v = {"bvocsr": __version__, "python": platform.python_version(),
         "numpy": numpy.__version__, "scipy": scipy.__version__}
    if "h5py" in sys.modules:
        v["h5py"] = sys.modules["h5py"].__version__
    return v


class RunLog:
    def __init__(self, command: str, argv=None):
        self.record = {
            "command": command,
            "argv": list(sys.argv[1:] if argv is None else argv),
            "started": dt.datetime.now(dt.timezone.utc).isoformat(),
            "seeds": {},
            "inputs": {},
            "outputs": [],
        }
        self._t0 = time.perf_counter()

    def inputs(self, *paths):
        self.record["inputs"].update(_digests(paths))

    def write(self, log_path: Path, outputs=(), **extra):
        self.record["outputs"] = [str(p) for p in outputs]
        self.record.update(extra)
        self.record["versions"] = _versions()
        self.record["finished"] = dt.datetime.now(dt.timezone.utc).isoformat()
        self.record["seconds"] = round(time.perf_counter() - self._t0, 3)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text(json.dumps(self.record, indent=1, default=str) + "\n")


def _log_path(out: Path, command: str) -> Path:
    if out.suffix == "" or out.is_dir():
        return out / f"{command}.log.json"
    return out.with_name(out.name + ".log.json")


def _say(args, msg: str):
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# shared helpers

def _emission_files(emission_dir: Path) -> list[Path]:
    if not emission_dir.is_dir():
        raise DataError(f"emission directory not found: {emission_dir}")
    files = sorted(emission_dir.glob("*.nc"))
    if not files:
        raise DataError(f"no .nc files in emission directory {emission_dir}")
    return files


def _load_emission(emission_dir: Path, variable: str):
    from .raster import load_raster_series

    grids = []
    for f in _emission_files(emission_dir):
        grids.extend(load_raster_series(f, variable))
    return grids


def _read_ids(path: Path, partition: str | None) -> list[int]:
    if not path.exists():
        raise DataError(f"id file not found: {path}")
    text = path.read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        return [int(tok) for tok in text.split()]
    if isinstance(obj, list):
        return [int(i) for i in obj]
    from .folds import FoldManifest

    return list(FoldManifest.from_dict(obj).partition(partition or "test_standard"))


def _refit_patches(patches, transform):
    """Recompute the transformed arrays of ``patches`` with ``transform``."""
    import numpy as np

    for p in patches:
        p.t_hr = np.asarray(transform.forward(p.i_hr))
        p.t_lr = np.asarray(transform.forward(p.i_lr))
    return patches


def _check_drivers(store, drivers):
    if not store.index:
        raise DataError(f"patch store {store.path} is empty")
    have = store.index[0].drivers
    missing = [d for d in drivers if d not in have]
    if missing:
        raise DataError(f"patch store {store.path} lacks driver channel(s) {missing}; "
                        f"it was built with {list(have)}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_make_toy(args) -> int:
    from .toy import make_toy

    out = Path(args.out)
    log = RunLog("make-toy")
    log.record["seeds"]["toy"] = args.seed
    paths = make_toy(out, seed=args.seed)
    log.write(_log_path(out, "make-toy"), outputs=paths.values())
    _say(args, f"toy dataset written to {out}")
    return 0


def cmd_preprocess(args) -> int:
    from .codes import DRIVER_CLASSES
    from .raster import (RasterKind, align_to, coarsen, load_landcover, load_raster,
                         load_raster_series, save_raster)

    s = _settings(args)
    lc_path = s.path("paths", "landcover")
    clim_path = s.path("paths", "climate")
    lai_path = s.path("paths", "lai", required=False)
    ref_path = s.path("paths", "reference", required=False)
    if ref_path is None:
        ref_path = _emission_files(s.path("paths", "emission_dir", flag="emission"))[0]
    out = s.path("paths", "preprocessed", flag="out", required=False) or \
        Path(s.get("paths", "out_dir", "out")) / "preprocessed"
    variable = s.get("extract", "variable", "isoprene")
    log = RunLog("preprocess")
    log.inputs(lc_path, clim_path, lai_path, ref_path)

    reference = load_raster_series(ref_path, variable)[0].extent
    lc = load_landcover(lc_path, s.get("paths", "lc_variable", "lc"))
    outputs = []
    for name, cls in DRIVER_CLASSES.items():
        frac = align_to(coarsen(lc, reference.cell_size, "fraction", cls=cls), reference)
        save_raster(frac, out / DRIVER_FILES[name], name)
        outputs.append(out / DRIVER_FILES[name])
    climate = load_raster(clim_path, "climate", kind=RasterKind.CLIMATE_CLASS)
    save_raster(align_to(climate, reference), out / CLIMATE_FILE, "climate")
    outputs.append(out / CLIMATE_FILE)
    if lai_path is not None:
        lai = [align_to(g, reference) for g in load_raster_series(lai_path, "lai", RasterKind.LAI)]
        save_raster(lai, out / DRIVER_FILES["lai"], "lai")
        outputs.append(out / DRIVER_FILES["lai"])
    log.write(_log_path(out, "preprocess"), outputs, reference=reference.to_dict())
    _say(args, f"aligned driver and climate maps written to {out}")
    return 0


def _driver_for_date(series, date, name):
    if len(series) == 1:
        return series[0]
    for g in series:
        if g.timestamp == date:
            return g
    raise DataError(f"driver {name!r} has no slice for {date}")


def cmd_extract(args) -> int:
    from .patchset import build_patch, extract_patches, write_store
    from .raster import RasterKind, load_raster, load_raster_series
    from .transform import fit

    s = _settings(args)
    pre = Path(s.get("paths", "out_dir", "out")) / "preprocessed"
    emission_dir = s.path("paths", "emission_dir", flag="emission")
    cl_path = s.path("paths", "cl", required=False) or pre / DRIVER_FILES["cl"]
    tc_path = s.path("paths", "tc", required=False) or pre / DRIVER_FILES["tc"]
    clim_path = getattr(args, "climate", None)
    clim_path = Path(clim_path) if clim_path else pre / CLIMATE_FILE
    lai_path = Path(args.lai) if getattr(args, "lai", None) else None
    out = Path(args.out) if args.out else Path(s.get("paths", "out_dir", "out")) / "store"
    patch_deg = float(s.get("extract", "patch_deg", 3.0))
    stride_deg = float(s.get("extract", "stride_deg", 1.0))
    zero_thresh = float(s.get("extract", "zero_threshold", 0.10, flag="zero_thresh"))
    alpha = int(s.get("extract", "alpha", 2))
    n_q = int(s.get("extract", "n_quantiles", 1000))
    variable = s.get("extract", "variable", "isoprene")
    seed = int(s.get("extract", "rng_seed", 0, flag="seed"))

    log = RunLog("extract-patches")
    log.record["seeds"]["transform_subsample"] = seed
    log.inputs(emission_dir, cl_path, tc_path, clim_path, lai_path)
    emission = _load_emission(emission_dir, variable)
    drivers = {"cl": [load_raster(cl_path, "cl", kind=RasterKind.PERCENTAGE)],
               "tc": [load_raster(tc_path, "tc", kind=RasterKind.PERCENTAGE)]}
    if lai_path is not None:
        drivers["lai"] = load_raster_series(lai_path, "lai", RasterKind.LAI)
    climate = load_raster(clim_path, "climate", kind=RasterKind.CLIMATE_CLASS)

    windows = list(extract_patches(emission, patch_deg, stride_deg, zero_thresh))
    if not windows:
        raise DataError("no patch survived the missing-value and zero-flux filters")
    # Extraction-time transform over every retained window; training refits
    # on its own partition.
    transform = fit([w.data for w in windows], n_quantiles=n_q,
                    max_samples=int(s.get("extract", "fit_max_samples", 10_000_000)), seed=seed)

    def patches():
        for pid, w in enumerate(windows):
            dgrids = {k: _driver_for_date(v, w.date, k) for k, v in drivers.items()}
            yield build_patch(w, dgrids, transform, alpha, climate, patch_id=pid)

    entries = write_store(patches(), out)
    transform.save(out / TRANSFORM_FILE)
    log.write(_log_path(out, "extract-patches"),
              [out / "index.jsonl", out / "patches.bin", out / TRANSFORM_FILE],
              n_patches=len(entries), n_dates=len(emission), drivers=list(drivers),
              patch_deg=patch_deg, stride_deg=stride_deg, zero_threshold=zero_thresh, alpha=alpha)
    _say(args, f"{len(entries)} patches written to {out}")
    return 0


def _fold_specs(section: dict, region_override=None):
    from .folds import BBox, default_specs

    region = region_override or section.get("region")
    if region is None:
        raise ConfigError("fold spec needs a spatial hold-out 'region' [lon_min, lon_max, lat_min, lat_max]")
    if isinstance(region, dict) and not {"lon_min", "lon_max", "lat_min", "lat_max"} <= set(region):
        regions = {k: BBox.from_dict(v) for k, v in region.items()}
    else:
        regions = BBox.from_dict(region)
    folds = section.get("classes")
    specs = default_specs(regions, int(section.get("rng_seed", 0)),
                          int(section.get("holdout_sample_size", 10_000)), folds)
    ratios = section.get("split_ratios")
    if ratios is not None:
        from dataclasses import replace

        specs = [replace(sp, split_ratios=tuple(float(r) for r in ratios)) for sp in specs]
    return specs


def cmd_build_folds(args) -> int:
    from .folds import build_fold, check_manifest
    from .patchset import PatchIndexEntry

    s = _settings(args)
    index_path = Path(args.index) if args.index else Path(s.get("paths", "out_dir", "out")) / "store" / "index.jsonl"
    spec_path = Path(args.spec) if args.spec else s.config_path
    if spec_path is None:
        raise ConfigError("build-folds needs --spec (or --config)")
    section = load_config(spec_path)
    section = section.get("folds", section)
    if args.seed is not None:
        section = {**section, "rng_seed": args.seed}
    out = Path(args.out) if args.out else Path(s.get("paths", "out_dir", "out")) / "folds"
    log = RunLog("build-folds")
    log.inputs(index_path, spec_path)
    if not index_path.exists():
        raise DataError(f"patch index not found: {index_path}")
    index = [PatchIndexEntry.from_json(line) for line in index_path.read_text().splitlines()
             if line.strip()]
    outputs, counts = [], {}
    for spec in _fold_specs(section):
        log.record["seeds"][spec.name] = spec.rng_seed
        manifest = build_fold(index, spec)
        problems = check_manifest(index, manifest)
        if problems:
            raise DataError(f"fold {spec.name}: " + "; ".join(problems[:5]))
        path = out / f"fold_{spec.name}.json"
        manifest.save(path)
        outputs.append(path)
        counts[spec.name] = {p: len(getattr(manifest, p)) for p in
                             ("train", "val", "test_standard", "test_unseen_spatial", "test_unseen_climate")}
    log.write(_log_path(out, "build-folds"), outputs, partition_sizes=counts)
    _say(args, f"{len(outputs)} fold manifests written to {out}")
    return 0


def cmd_analyze_stats(args) -> int:
    import csv

    from .patchset import PatchStore
    from .stats import entropy_study, spatial_correlation_study, temporal_correlation

    s = _settings(args)
    store_dir = Path(args.store) if args.store else Path(s.get("paths", "out_dir", "out")) / "store"
    driver = s.get("stats", "driver", "tc")
    bins = int(s.get("stats", "bins", 32))
    out = Path(args.out) if args.out else Path(s.get("paths", "out_dir", "out")) / "stats" / f"stats_{driver}.json"
    log = RunLog("analyze-stats")
    log.inputs(store_dir)
    store = PatchStore(store_dir)
    _check_drivers(store, [driver])
    patches = store.load()
    em = [p.i_lr for p in patches]
    dr = [p.driver(driver) for p in patches]
    ids = [p.meta.patch_id for p in patches]
    corr = spatial_correlation_study(em, dr, ids)
    ent = entropy_study(em, dr, bins, ids)
    series = temporal_correlation([p.meta.date for p in patches], em, dr)

    out.parent.mkdir(parents=True, exist_ok=True)
    per_patch = out.with_name(out.stem + "_patches.csv")
    per_date = out.with_name(out.stem + "_dates.csv")
    with open(per_patch, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patch_id", "date", "climate_class", "pcc", "h_cond_bits", "h_marg_bits"])
        for p, r, hc, hm in zip(patches, corr.values, ent.conditional, ent.marginal):
            w.writerow([p.meta.patch_id, p.meta.date, p.meta.climate_class, repr(float(r)),
                        repr(float(hc)), repr(float(hm))])
    with open(per_date, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "mean_isoprene", "mean_driver", "pcc"])
        for d, mi, md, r in zip(series.dates, series.mean_isoprene, series.mean_driver,
                                series.pcc_per_date):
            w.writerow([d, repr(float(mi)), repr(float(md)), repr(float(r))])
    report = {
        "driver": driver, "bins": bins, "n_patches": len(patches), "resolution": "LR",
        "pcc": corr.summary.to_dict(),
        "conditional_entropy_bits": ent.summary.to_dict(),
        "marginal_entropy_bits": {"mean": float(ent.marginal.mean())},
    }
    out.write_text(json.dumps(report, indent=1) + "\n")
    log.write(_log_path(out, "analyze-stats"), [out, per_patch, per_date])
    _say(args, f"driver {driver}: mean PCC {corr.summary.mean:.3f}, "
               f"mean H(isop|{driver}) {ent.summary.mean:.3f} bits")
    return 0


def _train_config(s: Settings):
    from .sr import TrainConfig

    section = dict(s.config.get("train", {}))
    section.pop("channels", None)
    section.pop("backend", None)
    section.pop("features", None)
    for key, flag in (("lr0", "lr0"), ("max_epochs", "max_epochs"), ("batch_size", "batch_size"),
                      ("rng_seed", "seed")):
        v = getattr(s.args, flag, None)
        if v is not None:
            section[key] = v
    return TrainConfig.from_dict(section)


def cmd_train(args) -> int:
    from .folds import FoldManifest
    from .patchset import PatchStore
    from .sr import BicubicBaseline, ConvModel, parse_channels, save_model, stack_patches, train
    from .transform import fit

    s = _settings(args)
    store_dir = Path(args.store) if args.store else Path(s.get("paths", "out_dir", "out")) / "store"
    manifest_path = Path(args.manifest) if args.manifest else None
    if manifest_path is None:
        fold = s.get("folds", "train_fold", "Cfb")
        manifest_path = Path(s.get("paths", "out_dir", "out")) / "folds" / f"fold_{fold}.json"
    channels = s.get("train", "channels", "isop")
    drivers = parse_channels(channels)
    backend = s.get("train", "backend", "conv")
    cfg = _train_config(s)
    n_q = int(s.get("extract", "n_quantiles", 1000))
    out = Path(args.out) if args.out else \
        Path(s.get("paths", "out_dir", "out")) / "models" / f"model_{channels.replace(',', '_')}.bin"

    log = RunLog("train")
    log.record["seeds"]["train"] = cfg.rng_seed
    log.inputs(store_dir, manifest_path)
    store = PatchStore(store_dir)
    _check_drivers(store, drivers)
    manifest = FoldManifest.load(manifest_path)
    if not manifest.train or not manifest.val:
        raise DataError(f"manifest {manifest_path} has an empty train or val partition")
    train_p = store.load(manifest.train)
    val_p = store.load(manifest.val)
    alpha = train_p[0].meta.alpha
    transform = fit([p.i_hr for p in train_p], n_quantiles=n_q)
    _refit_patches(train_p, transform)
    _refit_patches(val_p, transform)

    extra = {"channels": channels, "fold": manifest.name, "train_config": cfg.to_dict()}
    if backend == "bicubic":
        model = BicubicBaseline(alpha, 1 + len(drivers))
        summary = {}
    elif backend == "conv":
        features = int(s.get("train", "features", 16))
        model = ConvModel(1 + len(drivers), alpha, features, seed=cfg.rng_seed)
        res = train(model, stack_patches(train_p, drivers), stack_patches(val_p, drivers), cfg,
                    callback=(lambda r: _say(args, f"epoch {r['epoch']:3d}  train {r['train_loss']:.6g}"
                                                   f"  val {r['val_loss']:.6g}  lr {r['lr']:.1e}"))
                    if args.verbose else None)
        summary = {"epochs": len(res.history), "best_epoch": res.best_epoch,
                   "initial_val_loss": res.initial_val_loss, "best_val_loss": res.best_val_loss,
                   "stopped_early": res.stopped_early, "history": res.history}
    else:
        raise ConfigError(f"unknown backend {backend!r}; expected 'conv' or 'bicubic'")
    save_model(out, model, drivers, transform, extra)
    log.write(_log_path(out, "train"), [out], backend=backend, channels=channels,
              n_train=len(train_p), n_val=len(val_p), **summary)
    _say(args, f"{backend} model ({channels}) written to {out}")
    return 0


def _prepare_eval(model_path: Path, store_dir: Path, ids):
    from .patchset import PatchStore
    from .sr import load_model

    model, header = load_model(model_path)
    transform = header["transform"]
    if transform is None:
        raise DataError(f"model {model_path} carries no transform")
    drivers = tuple(header["drivers"])
    store = PatchStore(store_dir)
    _check_drivers(store, drivers)
    patches = _refit_patches(store.load(ids), transform)
    return model, transform, drivers, patches


def _predict(model, patches, drivers):
    from .sr import stack_patches

    x, _ = stack_patches(patches, drivers)
    return model.predict(x)


def cmd_deploy(args) -> int:
    from .raster import RasterGrid, RasterKind, save_raster

    s = _settings(args)
    model_path, store_dir, ids_path = Path(args.model), Path(args.store), Path(args.ids)
    out = Path(args.out)
    log = RunLog("deploy")
    log.inputs(model_path, store_dir, ids_path)
    ids = _read_ids(ids_path, s.get("evaluate", "partition", "test_standard"))
    model, transform, drivers, patches = _prepare_eval(model_path, store_dir, ids)
    outputs = []
    if patches:
        est = transform.inverse(_predict(model, patches, drivers))
        for p, e in zip(patches, est):
            grid = RasterGrid(p.meta.extent, e, RasterKind.EMISSION, p.meta.date)
            path = out / f"patch_{p.meta.patch_id:07d}.nc"
            save_raster(grid, path, "isoprene")
            outputs.append(path)
    out.mkdir(parents=True, exist_ok=True)
    log.write(_log_path(out, "deploy"), outputs, n_patches=len(outputs))
    _say(args, f"{len(outputs)} super-resolved patches written to {out}")
    return 0


DOMAIN_FLAGS = {"t": ("transformed",), "i": ("isoprene",), "both": ("transformed", "isoprene")}


def cmd_evaluate(args) -> int:
    from .folds import FoldManifest
    from .metrics import MetricsReport

    s = _settings(args)
    model_path, store_dir, manifest_path = Path(args.model), Path(args.store), Path(args.manifest)
    domain = s.get("evaluate", "domain", "both")
    if domain in ("transformed", "isoprene"):
        domain = domain[0]
    if domain not in DOMAIN_FLAGS:
        raise ConfigError(f"unknown domain {domain!r}; expected t, i or both")
    partition = s.get("evaluate", "partition", "test_standard")
    out = Path(args.out)
    log = RunLog("evaluate")
    log.inputs(model_path, store_dir, manifest_path)
    ids = FoldManifest.load(manifest_path).partition(partition)
    if not ids:
        raise DataError(f"partition {partition!r} of {manifest_path} is empty")
    model, transform, drivers, patches = _prepare_eval(model_path, store_dir, ids)
    pred_t = _predict(model, patches, drivers)
    report = MetricsReport()
    for p, est in zip(patches, pred_t):
        if "transformed" in DOMAIN_FLAGS[domain]:
            report.add(p.meta.patch_id, "transformed", est, p.t_hr)
        if "isoprene" in DOMAIN_FLAGS[domain]:
            report.add(p.meta.patch_id, "isoprene", transform.inverse(est), p.i_hr)
    report.write_csv(out)
    agg_path = out.with_suffix(".json")
    agg = {"model": str(model_path), "partition": partition, "n_patches": len(patches),
           "aggregates": report.aggregates()}
    agg_path.write_text(json.dumps(agg, indent=1, sort_keys=True) + "\n")
    log.write(_log_path(out, "evaluate"), [out, agg_path], partition=partition)
    for d, metrics in agg["aggregates"].items():
        _say(args, f"{d}: NMSE {metrics['nmse_db']['avg']:.3f} dB, SSIM {metrics['ssim']['avg']:.4f}")
    return 0


def cmd_report(args) -> int:
    import csv
    import math

    from .metrics import METRIC_NAMES, MetricsReport, nir_from_db

    evals = [Path(p) for p in args.eval]
    baseline = Path(args.baseline) if args.baseline else evals[0]
    out = Path(args.out)
    log = RunLog("report")
    log.inputs(*evals, baseline)
    for p in [*evals, baseline]:
        if not p.exists():
            raise DataError(f"evaluation CSV not found: {p}")
    base = MetricsReport.read_csv(baseline).aggregates()
    rows = []
    for path in evals:
        agg = MetricsReport.read_csv(path).aggregates()
        for domain, metrics in agg.items():
            row = {"eval": str(path), "domain": domain, "n": metrics["nmse_db"]["n"]}
            for m in METRIC_NAMES:
                row[f"{m}_avg"] = metrics[m]["avg"]
                row[f"{m}_std"] = metrics[m]["std"]
            ref = base.get(domain, {}).get("nmse_db", {}).get("avg", math.nan)
            row["nir"] = nir_from_db(metrics["nmse_db"]["avg"], ref)
            rows.append(row)
    out.parent.mkdir(parents=True, exist_ok=True)
    fields = ["eval", "domain", "n"] + [f"{m}_{k}" for m in METRIC_NAMES for k in ("avg", "std")] + ["nir"]
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    js = out.with_suffix(".json")
    js.write_text(json.dumps({"baseline": str(baseline), "rows": rows}, indent=1) + "\n")
    log.write(_log_path(out, "report"), [out, js])
    for r in rows:
        _say(args, f"{r['eval']} [{r['domain']}]: NMSE {r['nmse_db_avg']:.3f} dB, NIR {r['nir']:+.4f}")
    return 0


def cmd_run(args) -> int:
    """Run every stage from one config file."""
    if not args.config:
        raise ConfigError("run needs --config")
    s = _settings(args)
    out_dir = Path(args.out_dir) if args.out_dir else Path(s.get("paths", "out_dir", "out"))
    common = ["--config", str(args.config)] + (["--quiet"] if args.quiet else [])
    channels = args.channels or s.get("train", "channels", "isop")
    fold = s.get("folds", "train_fold", "Cfb")
    store = out_dir / "store"
    manifest = out_dir / "folds" / f"fold_{fold}.json"
    models = out_dir / "models"
    evals = out_dir / "eval"
    pre = out_dir / "preprocessed"

    def model_name(ch):
        return ch.replace(",", "_")

    steps = [
        ["preprocess", "--out", str(pre)],
        ["extract-patches", "--cl", str(pre / "cl.nc"), "--tc", str(pre / "tc.nc"),
         "--climate", str(pre / CLIMATE_FILE), "--out", str(store)]
        + (["--lai", str(pre / "lai.nc")] if s.path("paths", "lai", required=False) else []),
        ["build-folds", "--index", str(store / "index.jsonl"), "--spec", str(args.config),
         "--out", str(out_dir / "folds")],
        ["analyze-stats", "--store", str(store),
         "--out", str(out_dir / "stats" / f"stats_{s.get('stats', 'driver', 'tc')}.json")],
    ]
    configs = ["isop"] if channels == "isop" else ["isop", channels]
    steps.append(["train", "--store", str(store), "--manifest", str(manifest), "--channels", "isop",
                  "--backend", "bicubic", "--out", str(models / "bicubic.bin")])
    for ch in configs:
        steps.append(["train", "--store", str(store), "--manifest", str(manifest), "--channels", ch,
                      "--out", str(models / f"model_{model_name(ch)}.bin")])
    for name in ["bicubic"] + [f"model_{model_name(ch)}" for ch in configs]:
        steps.append(["evaluate", "--store", str(store), "--manifest", str(manifest),
                      "--model", str(models / f"{name}.bin"), "--out", str(evals / f"{name}.csv")])
    last = f"model_{model_name(configs[-1])}"
    steps.append(["deploy", "--model", str(models / f"{last}.bin"), "--store", str(store),
                  "--ids", str(manifest), "--out", str(out_dir / "deploy")])
    report = ["report", "--baseline", str(evals / "model_isop.csv"), "--out", str(out_dir / "report.csv")]
    for name in ["bicubic"] + [f"model_{model_name(ch)}" for ch in configs]:
        report += ["--eval", str(evals / f"{name}.csv")]
    steps.append(report)

    parser = build_parser()
    for step in steps:
        _say(args, f"== {step[0]}")
        sub = parser.parse_args([step[0], *common, *step[1:]])
        sub.func(sub)
    _say(args, f"pipeline finished; artifacts in {out_dir}")
    return 0


def cmd_experiment(args) -> int:
    """Synthetic single- vs multi-channel comparison."""
    from .sr import SyntheticSpec, TrainConfig, sisr_vs_misr_experiment

    spec = SyntheticSpec(n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
                         informative=not args.constant_drivers, seed=args.seed)
    cfg = TrainConfig(lr0=args.lr0, max_epochs=args.max_epochs, rng_seed=args.seed)
    res = sisr_vs_misr_experiment(spec, cfg, configs=args.channels)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"bicubic_nmse_db": res.bicubic_nmse_db, "rows": res.rows(),
                               "spec": spec.__dict__, "train_config": cfg.to_dict()}, indent=1) + "\n")
    for r in res.rows():
        _say(args, f"{r['channels']:12s} NMSE {r['nmse_db']:8.3f} dB  NIR {r['nir']:+.4f}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML (or JSON) run config; flags override its values")
    common.add_argument("--threads", type=int, help="cap on BLAS/OpenMP worker threads")
    common.add_argument("--quiet", action="store_true", help="suppress progress messages")

    p = _Parser(prog="bvocsr", description="Emission super-resolution pipeline")
    p.add_argument("--version", action="version", version=f"bvocsr {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("make-toy", parents=[common], help="write the bundled toy dataset")
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_make_toy)

    q = sub.add_parser("preprocess", parents=[common],
                       help="land-cover percentages and climate map on the emission grid")
    q.add_argument("--landcover", help="categorical land-cover NetCDF")
    q.add_argument("--climate", help="climate-class NetCDF")
    q.add_argument("--lai", help="optional LAI NetCDF")
    q.add_argument("--reference", help="emission file defining the target grid")
    q.add_argument("--emission", help="emission directory (first file is the reference)")
    q.add_argument("--variable", help="emission variable name (default isoprene)")
    q.add_argument("--out")
    q.set_defaults(func=cmd_preprocess)

    q = sub.add_parser("extract-patches", parents=[common], help="build the patch store")
    q.add_argument("--emission", help="directory of emission NetCDF files")
    q.add_argument("--cl")
    q.add_argument("--tc")
    q.add_argument("--climate")
    q.add_argument("--lai")
    q.add_argument("--out")
    q.add_argument("--patch-deg", dest="patch_deg", type=float)
    q.add_argument("--stride-deg", dest="stride_deg", type=float)
    q.add_argument("--zero-thresh", dest="zero_thresh", type=float)
    q.add_argument("--alpha", type=int)
    q.add_argument("--n-quantiles", dest="n_quantiles", type=int)
    q.add_argument("--variable")
    q.add_argument("--seed", type=int)
    q.set_defaults(func=cmd_extract)

    q = sub.add_parser("build-folds", parents=[common], help="write the four fold manifests")
    q.add_argument("--index")
    q.add_argument("--spec", help="fold spec (TOML/JSON; a [folds] table is used if present)")
    q.add_argument("--out")
    q.add_argument("--seed", type=int)
    q.set_defaults(func=cmd_build_folds)

    q = sub.add_parser("analyze-stats", parents=[common], help="driver correlation and entropy")
    q.add_argument("--store")
    q.add_argument("--driver", choices=("cl", "tc", "lai"))
    q.add_argument("--bins", type=int)
    q.add_argument("--out")
    q.set_defaults(func=cmd_analyze_stats)

    q = sub.add_parser("train", parents=[common], help="train a super-resolution model")
    q.add_argument("--store")
    q.add_argument("--manifest")
    q.add_argument("--channels", help="isop | isop,cl | isop,tc | isop,cl,tc (or another driver list)")
    q.add_argument("--backend", choices=("conv", "bicubic"))
    q.add_argument("--out")
    q.add_argument("--lr0", type=float)
    q.add_argument("--max-epochs", dest="max_epochs", type=int)
    q.add_argument("--batch-size", dest="batch_size", type=int)
    q.add_argument("--seed", type=int)
    q.add_argument("--verbose", action="store_true", help="print per-epoch losses")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("deploy", parents=[common], help="super-resolve patches to emission maps")
    q.add_argument("--model", required=True)
    q.add_argument("--store", required=True)
    q.add_argument("--ids", required=True, help="manifest JSON, JSON id list, or whitespace-separated ids")
    q.add_argument("--partition", help="manifest partition to deploy (default test_standard)")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_deploy)

    q = sub.add_parser("evaluate", parents=[common], help="per-patch metrics in both domains")
    q.add_argument("--store", required=True)
    q.add_argument("--manifest", required=True)
    q.add_argument("--model", required=True)
    q.add_argument("--domain", choices=tuple(DOMAIN_FLAGS))
    q.add_argument("--partition")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("report", parents=[common], help="NIR table against a baseline evaluation")
    q.add_argument("--eval", action="append", required=True)
    q.add_argument("--baseline")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_report)

    q = sub.add_parser("run", parents=[common], help="run the whole pipeline from a config")
    q.add_argument("--out-dir", dest="out_dir")
    q.add_argument("--channels")
    q.set_defaults(func=cmd_run)

    q = sub.add_parser("experiment", parents=[common], help="synthetic SISR vs MISR comparison")
    q.add_argument("--out", required=True)
    q.add_argument("--n-train", dest="n_train", type=int, default=2000)
    q.add_argument("--n-val", dest="n_val", type=int, default=200)
    q.add_argument("--n-test", dest="n_test", type=int, default=200)
    q.add_argument("--constant-drivers", dest="constant_drivers", action="store_true")
    q.add_argument("--channels", nargs="+", default=["isop", "isop,cl", "isop,tc", "isop,cl,tc"])
    q.add_argument("--lr0", type=float, default=1e-4)
    q.add_argument("--max-epochs", dest="max_epochs", type=int, default=30)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_experiment)
    return p


def _peek_threads(argv) -> int | None:
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            return int(argv[i + 1]) if argv[i + 1].isdigit() else None
        if a.startswith("--threads="):
            v = a.split("=", 1)[1]
            return int(v) if v.isdigit() else None
    return None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    threads = _peek_threads(argv)
    if threads:
        for var in THREAD_VARS:
            os.environ[var] = str(threads)
    try:
        args = build_parser().parse_args(argv)
        return int(args.func(args) or 0)
    except BVOCSRError as exc:
        print(f"bvocsr: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
