"""Scene and dataset types, KITTI-style binary IO, synthetic scenes, and splits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .errors import ConsistencyError, FormatError, ValidationError

POINT_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
POINT_RECORD_BYTES = 16  # x, y, z, intensity as consecutive little-endian float32
SEMANTIC_MASK = 0xFFFF  # lower 16 bits of a label record; upper 16 bits = instance id

STUFF = "stuff"
THING = "thing"
IGNORE = "ignore"


@dataclass(frozen=True)
class LabelSchema:
    """Class-id space of a dataset.

    ``raw_label_map`` translates on-disk raw semantic labels into train ids.
    When omitted, raw values already in ``[0, num_classes)`` pass through
    unchanged. Raw labels without a mapping land on the ignore class.
    """

    num_classes: int
    names: tuple[str, ...]
    thing_class_ids: frozenset[int]
    ignore_class_id: Optional[int] = None
    raw_label_map: Optional[Mapping[int, int]] = None

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "thing_class_ids", frozenset(self.thing_class_ids))
        if self.num_classes < 1:
            raise ValidationError("num_classes must be positive")
        if len(self.names) != self.num_classes:
            raise ValidationError(
                f"expected {self.num_classes} class names, got {len(self.names)}"
            )
        if not self.thing_class_ids <= set(range(self.num_classes)):
            raise ValidationError("thing_class_ids outside [0, num_classes)")
        if self.ignore_class_id is not None:
            if not 0 <= self.ignore_class_id < self.num_classes:
                raise ValidationError("ignore_class_id outside [0, num_classes)")
            if self.ignore_class_id in self.thing_class_ids:
                raise ValidationError("ignore class cannot be a thing class")
        if self.raw_label_map is not None:
            bad = [t for t in self.raw_label_map.values() if not 0 <= t < self.num_classes]
            if bad:
                raise ValidationError(f"raw_label_map targets outside class range: {bad}")

    def kind(self, class_id: int) -> str:
        if class_id == self.ignore_class_id:
            return IGNORE
        if class_id in self.thing_class_ids:
            return THING
        return STUFF

    def remap_raw(self, raw: np.ndarray) -> np.ndarray:
        """Map raw semantic labels to train ids; unknown values go to ignore."""
        raw = np.asarray(raw, dtype=np.int64)
        out = np.empty(raw.shape, dtype=np.int32)
        if self.raw_label_map is None:
            known = (raw >= 0) & (raw < self.num_classes)
            out[known] = raw[known].astype(np.int32)
        else:
            known = np.zeros(raw.shape, dtype=bool)
            out.fill(0)
            for src, dst in self.raw_label_map.items():
                hit = raw == src
                out[hit] = dst
                known |= hit
        if not known.all():
            if self.ignore_class_id is None:
                unknown = np.unique(raw[~known])
                raise FormatError(
                    f"unknown raw labels {unknown.tolist()} and schema has no ignore class"
                )
            out[~known] = self.ignore_class_id
        return out

    def to_dict(self) -> dict:
        d = {
            "num_classes": self.num_classes,
            "names": list(self.names),
            "thing_class_ids": sorted(self.thing_class_ids),
            "ignore_class_id": self.ignore_class_id,
        }
        if self.raw_label_map is not None:
            d["raw_label_map"] = {int(k): int(v) for k, v in self.raw_label_map.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LabelSchema":
        raw_map = d.get("raw_label_map")
        return cls(
            num_classes=int(d["num_classes"]),
            names=tuple(d["names"]),
            thing_class_ids=frozenset(int(c) for c in d["thing_class_ids"]),
            ignore_class_id=None if d.get("ignore_class_id") is None else int(d["ignore_class_id"]),
            raw_label_map=None if raw_map is None else {int(k): int(v) for k, v in raw_map.items()},
        )


def default_synthetic_schema() -> LabelSchema:
    """Schema used by the synthetic benchmark: one ignore class, three thing classes."""
    return LabelSchema(
        num_classes=7,
        names=("unlabeled", "road", "building", "vegetation", "car", "pedestrian", "cyclist"),
        thing_class_ids=frozenset({4, 5, 6}),
        ignore_class_id=0,
    )


@dataclass(frozen=True)
class Scene:
    """A point cloud of m points: coordinates, extra features, optional labels.

    Treated as immutable after construction; all operations return new scenes.
    """

    coords: np.ndarray  # (m, 3) float32, sensor-relative meters
    feats: np.ndarray  # (m, r) float32
    labels: Optional[np.ndarray] = None  # (m,) int32 train ids
    scene_id: str = ""

    def __post_init__(self):
        coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.float32))
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValidationError(f"coords must be (m, 3), got {coords.shape}")
        feats = np.ascontiguousarray(np.asarray(self.feats, dtype=np.float32))
        if feats.ndim != 2:
            raise ValidationError(f"feats must be (m, r), got {feats.shape}")
        if feats.shape[0] != coords.shape[0]:
            raise ConsistencyError(
                f"coords have {coords.shape[0]} points but feats have {feats.shape[0]}"
            )
        if not np.isfinite(coords).all():
            raise ValidationError("coords contain non-finite values")
        labels = self.labels
        if labels is not None:
            labels = np.ascontiguousarray(np.asarray(labels, dtype=np.int32))
            if labels.shape != (coords.shape[0],):
                raise ConsistencyError(
                    f"labels shape {labels.shape} does not match {coords.shape[0]} points"
                )
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "feats", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def num_points(self) -> int:
        return self.coords.shape[0]

    @property
    def num_feats(self) -> int:
        return self.feats.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def with_labels(self, labels: np.ndarray) -> "Scene":
        return Scene(self.coords, self.feats, labels, self.scene_id)

    def without_labels(self) -> "Scene":
        return Scene(self.coords, self.feats, None, self.scene_id)


def load_scene_kitti(
    bin_path, label_path=None, schema: Optional[LabelSchema] = None, scene_id: Optional[str] = None
) -> Scene:
    """Load a scene from the 16-byte-per-point binary format.

    Each point is four little-endian float32 values (x, y, z, intensity).
    The optional label file holds one little-endian uint32 per point; the
    lower 16 bits are the raw semantic label (remapped through ``schema``),
    the upper 16 bits an instance id that is discarded.
    """
    bin_path = Path(bin_path)
    size = bin_path.stat().st_size
    if size % POINT_RECORD_BYTES != 0:
        raise FormatError(
            f"{bin_path}: size {size} not divisible by {POINT_RECORD_BYTES}-byte point records"
        )
    records = np.fromfile(bin_path, dtype=POINT_DTYPE).reshape(-1, 4)
    m = records.shape[0]
    coords = records[:, :3].copy()
    feats = records[:, 3:4].copy()

    labels = None
    if label_path is not None:
        raw = np.fromfile(Path(label_path), dtype=LABEL_DTYPE)
        if raw.size != m:
            raise ConsistencyError(
                f"{label_path}: {raw.size} label records for {m} points"
            )
        if schema is None:
            raise ValidationError("schema required to decode labels")
        semantic = (raw.astype(np.int64)) & SEMANTIC_MASK
        labels = schema.remap_raw(semantic)

    if scene_id is None:
        scene_id = bin_path.stem
    return Scene(coords, feats, labels, scene_id)


def save_scene(scene: Scene, bin_path, label_path=None) -> None:
    """Write a scene in the binary point format; round-trips bit-exactly.

    Labels are written as uint32 records with the upper 16 bits zeroed, so a
    reload through an identity schema reproduces them.
    """
    if scene.has_labels != (label_path is not None):
        raise ValidationError("label_path must be given exactly when the scene has labels")
    if scene.num_feats != 1:
        raise ConsistencyError(
            f"point format stores exactly one extra feature, scene has r={scene.num_feats}"
        )
    records = np.empty((scene.num_points, 4), dtype=POINT_DTYPE)
    records[:, :3] = scene.coords
    records[:, 3] = scene.feats[:, 0]
    records.tofile(bin_path)
    if label_path is not None:
        labels = scene.labels
        if (labels < 0).any() or (labels > SEMANTIC_MASK).any():
            raise ValidationError("labels must fit in 16 bits and be non-negative")
        labels.astype(LABEL_DTYPE).tofile(label_path)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic scene generator.

    ``class_mix`` gives the expected number of instance clusters per thing
    class; the actual count per scene is Poisson-distributed.
    """

    extent: float = 50.0
    class_mix: Mapping[int, float] = field(default_factory=dict)
    points_per_instance: tuple[int, int] = (30, 80)
    noise_sigma: float = 0.05
    seed: int = 0
    ground_points: int = 1500
    road_class: int = 1

    def __post_init__(self):
        object.__setattr__(self, "class_mix", dict(self.class_mix))
        lo, hi = self.points_per_instance
        object.__setattr__(self, "points_per_instance", (int(lo), int(hi)))
        if self.extent <= 0:
            raise ValidationError("extent must be positive")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be non-negative")
        if any(v < 0 for v in self.class_mix.values()):
            raise ValidationError("class_mix counts must be non-negative")
        if not 0 < lo <= hi:
            raise ValidationError("points_per_instance must satisfy 0 < lo <= hi")
        if self.ground_points < 0:
            raise ValidationError("ground_points must be non-negative")

    def to_dict(self) -> dict:
        return {
            "extent": self.extent,
            "class_mix": {int(k): float(v) for k, v in self.class_mix.items()},
            "points_per_instance": list(self.points_per_instance),
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "ground_points": self.ground_points,
            "road_class": self.road_class,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSpec":
        return cls(
            extent=float(d["extent"]),
            class_mix={int(k): float(v) for k, v in d.get("class_mix", {}).items()},
            points_per_instance=tuple(d.get("points_per_instance", (30, 80))),
            noise_sigma=float(d.get("noise_sigma", 0.05)),
            seed=int(d.get("seed", 0)),
            ground_points=int(d.get("ground_points", 1500)),
            road_class=int(d.get("road_class", 1)),
        )


def class_intensity_band(class_id: int) -> tuple[float, float]:
    """Intensity band assigned to a class by the synthetic generator.

    Bands are disjoint with narrow gaps, so intensity carries clean class
    evidence while neighbouring ids stay adjacent in feature space.
    """
    base = ((class_id % 8) + 0.5) / 8.0
    return max(0.0, base - 0.03), min(1.0, base + 0.03)


def class_size_scale(class_id: int) -> float:
    """Half-extent multiplier per class; differentiates clusters by size."""
    return 0.6 + 0.2 * ((class_id * 3) % 5)


def generate_synthetic_scene(spec: SyntheticSpec, seed: int) -> Scene:
    """Generate a labeled scene: a ground plane plus thing-class clusters.

    Fully deterministic for a fixed ``(spec, seed)``. The draw order on
    ``numpy.random.default_rng(seed)`` is:

    1. ground xy: ``uniform(-extent, extent, (ground_points, 2))``
    2. ground z: ``normal(0, noise_sigma, ground_points)``
    3. ground intensity: ``uniform(*class_intensity_band(road_class), ground_points)``
    4. for each class id in ``sorted(class_mix)``:
       a. cluster count: ``poisson(class_mix[class_id])``
       b. per cluster, in order: center ``uniform(-extent, extent, 2)``,
          half-extents ``uniform(0.4, 1.6, 3) * class_size_scale(class_id)``,
          point count ``integers(lo, hi, endpoint=True)``, offsets
          ``uniform(-1, 1, (count, 3)) * half``, intensity
          ``uniform(*class_intensity_band(class_id), count)``.
       Cluster centers sit at z = half_z so boxes rest on the plane.
    """
    rng = np.random.default_rng(seed)
    e = spec.extent
    lo, hi = spec.points_per_instance

    xyz_parts = []
    int_parts = []
    lab_parts = []

    g = spec.ground_points
    gxy = rng.uniform(-e, e, size=(g, 2))
    gz = rng.normal(0.0, spec.noise_sigma, size=g)
    band = class_intensity_band(spec.road_class)
    gi = rng.uniform(band[0], band[1], size=g)
    xyz_parts.append(np.column_stack([gxy, gz]))
    int_parts.append(gi)
    lab_parts.append(np.full(g, spec.road_class, dtype=np.int32))

    for class_id in sorted(spec.class_mix):
        lam = spec.class_mix[class_id]
        count = int(rng.poisson(lam))
        band = class_intensity_band(class_id)
        scale = class_size_scale(class_id)
        for _ in range(count):
            center = rng.uniform(-e, e, size=2)
            half = rng.uniform(0.4, 1.6, size=3) * scale
            npts = int(rng.integers(lo, hi, endpoint=True))
            offsets = rng.uniform(-1.0, 1.0, size=(npts, 3)) * half
            xyz = offsets + np.array([center[0], center[1], half[2]])
            intens = rng.uniform(band[0], band[1], size=npts)
            xyz_parts.append(xyz)
            int_parts.append(intens)
            lab_parts.append(np.full(npts, class_id, dtype=np.int32))

    coords = np.concatenate(xyz_parts, axis=0).astype(np.float32)
    feats = np.concatenate(int_parts)[:, None].astype(np.float32)
    labels = np.concatenate(lab_parts)
    return Scene(coords, feats, labels, scene_id=f"synth-{seed:08d}")


def generate_synthetic_dataset(
    spec: SyntheticSpec, num_scenes: int, schema: LabelSchema
) -> "Dataset":
    """Generate ``num_scenes`` scenes; scene i uses seed ``spec.seed + i``."""
    if num_scenes < 1:
        raise ValidationError("num_scenes must be positive")
    scenes = tuple(generate_synthetic_scene(spec, spec.seed + i) for i in range(num_scenes))
    return Dataset(scenes=scenes, schema=schema)


@dataclass(frozen=True)
class Dataset:
    """An ordered collection of scenes with a labeled/unlabeled partition.

    Ground truth on unlabeled scenes stays available for evaluation through
    ``ground_truth_scene`` but is stripped by ``training_scene``.
    """

    scenes: tuple[Scene, ...]
    schema: LabelSchema
    labeled_ids: tuple[int, ...] = ()
    unlabeled_ids: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "scenes", tuple(self.scenes))
        object.__setattr__(self, "labeled_ids", tuple(int(i) for i in self.labeled_ids))
        object.__setattr__(self, "unlabeled_ids", tuple(int(i) for i in self.unlabeled_ids))
        n = len(self.scenes)
        lab = set(self.labeled_ids)
        unlab = set(self.unlabeled_ids)
        if lab & unlab:
            raise ConsistencyError("labeled_ids and unlabeled_ids overlap")
        for i in lab | unlab:
            if not 0 <= i < n:
                raise ValidationError(f"scene index {i} out of range (N={n})")
        for i in self.labeled_ids:
            if not self.scenes[i].has_labels:
                raise ValidationError(f"scene {i} is marked labeled but carries no labels")

    def __len__(self) -> int:
        return len(self.scenes)

    def training_scene(self, idx: int) -> Scene:
        """Scene as visible to training: unlabeled scenes come without labels."""
        scene = self.scenes[idx]
        if idx in set(self.unlabeled_ids):
            return scene.without_labels()
        return scene

    def ground_truth_scene(self, idx: int) -> Scene:
        """Scene with labels intact; for evaluation only."""
        return self.scenes[idx]


def split_dataset(dataset: Dataset, labeled_ratio: float, seed: int) -> Dataset:
    """Seeded uniform split into ceil(ratio * N) labeled scenes and the rest."""
    n = len(dataset)
    if n == 0:
        raise ValidationError("cannot split an empty dataset")
    if not 0 < labeled_ratio <= 1:
        raise ValidationError(f"labeled_ratio must be in (0, 1], got {labeled_ratio}")
    n_labeled = math.ceil(labeled_ratio * n)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=n_labeled, replace=False)
    labeled = tuple(sorted(int(i) for i in chosen))
    unlabeled = tuple(i for i in range(n) if i not in set(labeled))
    return Dataset(
        scenes=dataset.scenes,
        schema=dataset.schema,
        labeled_ids=labeled,
        unlabeled_ids=unlabeled,
    )
