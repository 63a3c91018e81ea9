"""Climate-specific dataset folds and their three test scenarios.

For a fold that holds out a set of climate classes:

* ``test_unseen_climate`` samples patches of the held-out classes,
* ``test_unseen_spatial`` samples held-in patches whose centre lies in the
  spatial hold-out box,
* the remaining held-in patches outside the box are shuffled and split
  75/5/20 into ``train`` / ``val`` / ``test_standard``.

Held-out patches that were not sampled are simply unused.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codes import DEFAULT_MED_CLASSES, climate_code
from .errors import ConfigError, DataError
from .patchset import PatchIndexEntry

PARTITIONS = ("train", "val", "test_standard", "test_unseen_spatial", "test_unseen_climate")
DEFAULT_FOLDS = {
    "Cfb": ("Cfb",),
    "Dfb": ("Dfb",),
    "Dfc": ("Dfc",),
    "Med": DEFAULT_MED_CLASSES,
}


@dataclass(frozen=True)
class BBox:
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float

    def __post_init__(self):
        if not (self.lon_min < self.lon_max and self.lat_min < self.lat_max):
            raise ConfigError(f"degenerate bounding box {self}")

    def contains(self, lon: float, lat: float) -> bool:
        return self.lon_min <= lon <= self.lon_max and self.lat_min <= lat <= self.lat_max

    def to_dict(self) -> dict:
        return {"lon_min": self.lon_min, "lon_max": self.lon_max,
                "lat_min": self.lat_min, "lat_max": self.lat_max}

    @classmethod
    def from_dict(cls, d) -> "BBox":
        if isinstance(d, (list, tuple)):
            return cls(*map(float, d))
        return cls(float(d["lon_min"]), float(d["lon_max"]), float(d["lat_min"]), float(d["lat_max"]))


@dataclass(frozen=True)
class FoldSpec:
    name: str
    held_out_classes: frozenset[str]
    spatial_holdout_region: BBox
    split_ratios: tuple[float, float, float] = (0.75, 0.05, 0.20)
    holdout_sample_size: int = 10_000
    rng_seed: int = 0

    def __post_init__(self):
        if not self.held_out_classes:
            raise ConfigError(f"fold {self.name!r}: held_out_classes is empty")
        for c in self.held_out_classes:
            try:
                climate_code(c)
            except ValueError as exc:
                raise ConfigError(f"fold {self.name!r}: {exc}") from None
        if len(self.split_ratios) != 3 or min(self.split_ratios) < 0:
            raise ConfigError("split_ratios must be three non-negative numbers")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split_ratios {self.split_ratios} do not sum to 1")
        if self.holdout_sample_size < 1:
            raise ConfigError("holdout_sample_size must be positive")

    @property
    def held_out_codes(self) -> frozenset[int]:
        return frozenset(climate_code(c) for c in self.held_out_classes)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "held_out_classes": sorted(self.held_out_classes),
            "split_ratios": list(self.split_ratios),
            "spatial_holdout_region": self.spatial_holdout_region.to_dict(),
            "holdout_sample_size": self.holdout_sample_size,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSpec":
        try:
            return cls(
                name=str(d["name"]),
                held_out_classes=frozenset(d["held_out_classes"]),
                spatial_holdout_region=BBox.from_dict(d["spatial_holdout_region"]),
                split_ratios=tuple(float(x) for x in d.get("split_ratios", (0.75, 0.05, 0.20))),
                holdout_sample_size=int(d.get("holdout_sample_size", 10_000)),
                rng_seed=int(d.get("rng_seed", 0)),
            )
        except KeyError as exc:
            raise ConfigError(f"fold spec is missing {exc}") from None


@dataclass
class FoldManifest:
    name: str
    train: list[int] = field(default_factory=list)
    val: list[int] = field(default_factory=list)
    test_standard: list[int] = field(default_factory=list)
    test_unseen_spatial: list[int] = field(default_factory=list)
    test_unseen_climate: list[int] = field(default_factory=list)
    spec: FoldSpec | None = None

    def partition(self, name: str) -> list[int]:
        if name not in PARTITIONS:
            raise ConfigError(f"unknown partition {name!r}; expected one of {PARTITIONS}")
        return getattr(self, name)

    def to_dict(self) -> dict:
        d = {"name": self.name}
        d.update({p: list(map(int, getattr(self, p))) for p in PARTITIONS})
        d["spec"] = self.spec.to_dict() if self.spec else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FoldManifest":
        spec = FoldSpec.from_dict(d["spec"]) if d.get("spec") else None
        return cls(d["name"], *[list(d[p]) for p in PARTITIONS], spec=spec)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "FoldManifest":
        p = Path(path)
        if not p.exists():
            raise DataError(f"manifest not found: {p}")
        return cls.from_dict(json.loads(p.read_text()))


def _rng(seed: int) -> np.random.Generator:
    # Philox is counter-based, so streams are reproducible across platforms.
    return np.random.Generator(np.random.Philox(seed))


def split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def build_fold(index: Sequence[PatchIndexEntry], spec: FoldSpec) -> FoldManifest:
    """Materialise one fold; deterministic for a given ``spec.rng_seed``."""
    if not index:
        raise DataError("empty patch index")
    held = spec.held_out_codes
    box = spec.spatial_holdout_region
    ids = np.array([e.patch_id for e in index], dtype=np.int64)
    if np.unique(ids).size != ids.size:
        raise DataError("duplicate patch ids in index")
    is_held = np.array([e.climate_class in held for e in index])
    in_box = np.array([box.contains(*e.center) for e in index])

    climate_pool = np.sort(ids[is_held])
    spatial_pool = np.sort(ids[~is_held & in_box])
    standard_pool = np.sort(ids[~is_held & ~in_box])
    for name, pool in (("unseen-climate", climate_pool), ("unseen-spatial", spatial_pool),
                       ("standard", standard_pool)):
        if pool.size == 0:
            raise DataError(f"fold {spec.name!r}: no eligible patches for the {name} scenario")

    rng = _rng(spec.rng_seed)

    def sample(pool):
        k = min(spec.holdout_sample_size, pool.size)
        return np.sort(rng.choice(pool, size=k, replace=False))

    unseen_climate = sample(climate_pool)
    unseen_spatial = sample(spatial_pool)
    shuffled = rng.permutation(standard_pool)
    n_train, n_val, _ = split_counts(shuffled.size, spec.split_ratios)
    return FoldManifest(
        name=spec.name,
        train=sorted(shuffled[:n_train].tolist()),
        val=sorted(shuffled[n_train:n_train + n_val].tolist()),
        test_standard=sorted(shuffled[n_train + n_val:].tolist()),
        test_unseen_spatial=unseen_spatial.tolist(),
        test_unseen_climate=unseen_climate.tolist(),
        spec=spec,
    )


def check_manifest(index: Sequence[PatchIndexEntry], manifest: FoldManifest,
                   spec: FoldSpec | None = None) -> list[str]:
    """Return human-readable violations of the fold invariants (empty if none)."""
    spec = spec or manifest.spec
    if spec is None:
        raise ValueError("manifest has no spec to check against")
    by_id = {e.patch_id: e for e in index}
    held = spec.held_out_codes
    box = spec.spatial_holdout_region
    problems = []

    sets = {p: set(getattr(manifest, p)) for p in PARTITIONS}
    for i, a in enumerate(PARTITIONS):
        if len(sets[a]) != len(getattr(manifest, a)):
            problems.append(f"{a} has duplicate ids")
        for b in PARTITIONS[i + 1:]:
            if sets[a] & sets[b]:
                problems.append(f"{a} and {b} overlap")
    unknown = set().union(*sets.values()) - set(by_id)
    if unknown:
        problems.append(f"{len(unknown)} ids not in index")

    for p in ("train", "val", "test_standard"):
        for pid in sets[p] & set(by_id):
            e = by_id[pid]
            if e.climate_class in held:
                problems.append(f"{p}: patch {pid} has held-out class")
            if box.contains(*e.center):
                problems.append(f"{p}: patch {pid} lies in the spatial hold-out region")
    for pid in sets["test_unseen_climate"] & set(by_id):
        if by_id[pid].climate_class not in held:
            problems.append(f"test_unseen_climate: patch {pid} not in held-out class")
    for pid in sets["test_unseen_spatial"] & set(by_id):
        e = by_id[pid]
        if not box.contains(*e.center) or e.climate_class in held:
            problems.append(f"test_unseen_spatial: patch {pid} outside region or held-out class")
    return problems


def default_specs(regions: dict[str, BBox] | BBox, rng_seed: int = 0,
                  holdout_sample_size: int = 10_000,
                  folds: dict[str, Sequence[str]] | None = None) -> list[FoldSpec]:
    """The four standard folds (Cfb, Dfb, Dfc, Med). ``regions`` is one box for
    every fold or a per-fold mapping."""
    folds = DEFAULT_FOLDS if folds is None else folds
    specs = []
    for name, classes in folds.items():
        box = regions if isinstance(regions, BBox) else regions[name]
        specs.append(FoldSpec(name, frozenset(classes), box,
                              holdout_sample_size=holdout_sample_size, rng_seed=rng_seed))
    return specs
