"""BEV grid patchification and the patch/instance pools used for mixing.

A scene is partitioned into T = n*n non-overlapping bird's-eye-view cells.
Pools map a patch index to the fragments (patches or per-class instances)
harvested at that index across many scenes. Labeled pools persist for the
whole training run; pseudo pools are rebuilt from the current batch every
iteration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConsistencyError, FormatError, ValidationError
from .scene_model import LabelSchema, Scene, load_scene_kitti

DEFAULT_GRID_N = 18
DEFAULT_BEV_RANGE = (-50.0, 50.0)
DEFAULT_TAU_MIN = 5

SCOPE_LABELED = "persistent-labeled"
SCOPE_PSEUDO = "batch-pseudo"


@dataclass(frozen=True)
class GridSpec:
    """Regular BEV grid: n splits per axis over the given x/y ranges."""

    n: int = DEFAULT_GRID_N
    x_range: tuple[float, float] = DEFAULT_BEV_RANGE
    y_range: tuple[float, float] = DEFAULT_BEV_RANGE

    def __post_init__(self):
        object.__setattr__(self, "x_range", (float(self.x_range[0]), float(self.x_range[1])))
        object.__setattr__(self, "y_range", (float(self.y_range[0]), float(self.y_range[1])))
        if self.n < 1:
            raise ValidationError("grid n must be >= 1")
        if not (self.x_range[1] > self.x_range[0] and self.y_range[1] > self.y_range[0]):
            raise ValidationError("grid ranges must satisfy max > min")

    @property
    def total_patches(self) -> int:
        return self.n * self.n

    @property
    def cell_size(self) -> tuple[float, float]:
        return (
            (self.x_range[1] - self.x_range[0]) / self.n,
            (self.y_range[1] - self.y_range[0]) / self.n,
        )

    def assign(self, coords: np.ndarray) -> np.ndarray:
        """Patch index per point, or -1 for points outside either range.

        Cell = (floor((x - x_min) / side_x), floor((y - y_min) / side_y)),
        with values exactly on the upper bound clamped into the last cell.
        Index = row * n + col where col comes from x and row from y.
        """
        x = coords[:, 0].astype(np.float64)
        y = coords[:, 1].astype(np.float64)
        side_x, side_y = self.cell_size
        in_range = (
            (x >= self.x_range[0])
            & (x <= self.x_range[1])
            & (y >= self.y_range[0])
            & (y <= self.y_range[1])
        )
        col = np.floor((x - self.x_range[0]) / side_x).astype(np.int64)
        row = np.floor((y - self.y_range[0]) / side_y).astype(np.int64)
        np.clip(col, 0, self.n - 1, out=col)
        np.clip(row, 0, self.n - 1, out=row)
        out = row * self.n + col
        out[~in_range] = -1
        return out

    def to_dict(self) -> dict:
        return {"n": self.n, "x_range": list(self.x_range), "y_range": list(self.y_range)}

    @classmethod
    def from_dict(cls, d) -> "GridSpec":
        return cls(n=int(d["n"]), x_range=tuple(d["x_range"]), y_range=tuple(d["y_range"]))


@dataclass(frozen=True)
class Patch:
    """Points of one scene falling in one BEV cell (local copies)."""

    index: int
    coords: np.ndarray
    feats: np.ndarray
    labels: Optional[np.ndarray]
    source_scene: str

    @property
    def num_points(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class Instance:
    """All points of one thing class inside one patch."""

    class_id: int
    coords: np.ndarray
    feats: np.ndarray
    index: int
    source_scene: str

    def __post_init__(self):
        # filling checks boxes against every candidate, so precompute once
        object.__setattr__(self, "aabb_min", self.coords.min(axis=0).astype(np.float64))
        object.__setattr__(self, "aabb_max", self.coords.max(axis=0).astype(np.float64))

    @property
    def num_points(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class PoolConfig:
    tau_min: int = DEFAULT_TAU_MIN
    capacity_per_index: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.tau_min < 1:
            raise ValidationError("tau_min must be >= 1")
        if self.capacity_per_index is not None and self.capacity_per_index < 1:
            raise ValidationError("capacity_per_index must be >= 1 when set")


class _IndexedPool:
    """Common pool machinery: tau_min admission and reservoir-capped storage."""

    def __init__(self, scope: str, config: PoolConfig):
        if scope not in (SCOPE_LABELED, SCOPE_PSEUDO):
            raise ValidationError(f"unknown pool scope {scope!r}")
        self.scope = scope
        self.config = config
        self.entries: dict[int, list] = {}
        self._seen: dict[int, int] = {}

    def add(self, entry, rng: np.random.Generator) -> bool:
        """Insert an entry unless it is below tau_min; reservoir-replace at capacity."""
        if entry.num_points < self.config.tau_min:
            return False
        bucket = self.entries.setdefault(entry.index, [])
        seen = self._seen.get(entry.index, 0)
        cap = self.config.capacity_per_index
        if cap is None or len(bucket) < cap:
            bucket.append(entry)
        else:
            # Algorithm R: entry i>cap replaces a random slot with prob cap/(i+1).
            slot = int(rng.integers(0, seen + 1))
            if slot < cap:
                bucket[slot] = entry
        self._seen[entry.index] = seen + 1
        return True

    def get(self, index: int) -> list:
        return self.entries.get(index, [])

    def indices(self) -> list[int]:
        return sorted(self.entries)

    def total_entries(self) -> int:
        return sum(len(v) for v in self.entries.values())


class PatchPool(_IndexedPool):
    pass


class InstancePool(_IndexedPool):
    pass


def patchify(scene: Scene, grid: GridSpec) -> tuple[list[Patch], np.ndarray]:
    """Partition in-range points into patches; return (patches, out-of-range indices).

    Patches are sorted by index and empty cells are omitted. Together the
    patch point sets and the out-of-range index set partition the scene.
    """
    cells = grid.assign(scene.coords)
    out_of_range = np.flatnonzero(cells == -1).astype(np.int64)
    valid = np.flatnonzero(cells >= 0)
    patches: list[Patch] = []
    if valid.size:
        order = valid[np.argsort(cells[valid], kind="stable")]
        sorted_cells = cells[order]
        # one gather per array, then cheap per-patch slicing
        coords_s = scene.coords[order]
        feats_s = scene.feats[order]
        labels_s = None if scene.labels is None else scene.labels[order]
        starts = np.flatnonzero(np.r_[True, sorted_cells[1:] != sorted_cells[:-1]])
        bounds = np.r_[starts, sorted_cells.size]
        for k in range(starts.size):
            sl = slice(bounds[k], bounds[k + 1])
            patches.append(
                Patch(
                    index=int(sorted_cells[bounds[k]]),
                    coords=coords_s[sl],
                    feats=feats_s[sl],
                    labels=None if labels_s is None else labels_s[sl],
                    source_scene=scene.scene_id,
                )
            )
    return patches, out_of_range


def extract_instances(patch: Patch, schema: LabelSchema, tau_min: int = DEFAULT_TAU_MIN) -> list[Instance]:
    """One instance per thing class present in the patch, dropping groups below tau_min."""
    if patch.labels is None:
        raise ValidationError("instance extraction needs a labeled patch")
    out: list[Instance] = []
    counts = np.bincount(patch.labels, minlength=schema.num_classes)
    for class_id in sorted(schema.thing_class_ids):
        if class_id >= counts.size or counts[class_id] < tau_min:
            continue
        members = np.flatnonzero(patch.labels == class_id)
        out.append(
            Instance(
                class_id=class_id,
                coords=patch.coords[members],
                feats=patch.feats[members],
                index=patch.index,
                source_scene=patch.source_scene,
            )
        )
    return out


def _aggregate_pools(
    scenes: Iterable[Scene],
    grid: GridSpec,
    config: PoolConfig,
    schema: LabelSchema,
    scope: str,
) -> tuple[PatchPool, InstancePool]:
    patch_pool = PatchPool(scope, config)
    ins_pool = InstancePool(scope, config)
    rng = np.random.default_rng(config.seed)
    for scene in scenes:
        if not scene.has_labels:
            raise ValidationError(f"pool construction needs labeled scenes ({scene.scene_id!r})")
        patches, _ = patchify(scene, grid)
        for patch in patches:
            patch_pool.add(patch, rng)
            for inst in extract_instances(patch, schema, config.tau_min):
                ins_pool.add(inst, rng)
    return patch_pool, ins_pool


def build_labeled_pools(
    labeled_scenes: Sequence[Scene],
    grid: GridSpec,
    config: PoolConfig,
    schema: LabelSchema,
) -> tuple[PatchPool, InstancePool]:
    """Persistent pools aggregated over the whole labeled training set."""
    return _aggregate_pools(labeled_scenes, grid, config, schema, SCOPE_LABELED)


def build_pseudo_pools(
    erased_scenes: Sequence,
    grid: GridSpec,
    config: PoolConfig,
    schema: LabelSchema,
) -> tuple[PatchPool, InstancePool]:
    """Batch-scoped pools from this iteration's erased scenes; never carried over."""
    return _aggregate_pools(
        (es.scene for es in erased_scenes), grid, config, schema, SCOPE_PSEUDO
    )


def save_pool_manifest(
    manifest_path,
    patch_pool: PatchPool,
    ins_pool: InstancePool,
    grid: GridSpec,
    config: PoolConfig,
    schema: LabelSchema,
    scene_files: dict[str, tuple[str, str]],
) -> None:
    """Persist pools as references: (scene, patch index[, class]) per entry.

    ``scene_files`` maps scene id to (bin, label) paths relative to the
    manifest directory; payloads stay in the scene files themselves.
    """
    scene_ids = sorted({e.source_scene for b in patch_pool.entries.values() for e in b}
                       | {e.source_scene for b in ins_pool.entries.values() for e in b})
    missing = [s for s in scene_ids if s not in scene_files]
    if missing:
        raise ConsistencyError(f"no file reference for pooled scenes: {missing}")
    sid_index = {sid: k for k, sid in enumerate(scene_ids)}
    doc = {
        "kind": "scenemix-pool-manifest",
        "grid": grid.to_dict(),
        "tau_min": config.tau_min,
        "capacity_per_index": config.capacity_per_index,
        "seed": config.seed,
        "schema": schema.to_dict(),
        "scenes": [
            {"id": sid, "bin": scene_files[sid][0], "label": scene_files[sid][1]}
            for sid in scene_ids
        ],
        "patches": [
            {"index": idx, "scene": sid_index[e.source_scene]}
            for idx in sorted(patch_pool.entries)
            for e in patch_pool.entries[idx]
        ],
        "instances": [
            {"index": idx, "scene": sid_index[e.source_scene], "class_id": e.class_id}
            for idx in sorted(ins_pool.entries)
            for e in ins_pool.entries[idx]
        ],
    }
    Path(manifest_path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_pool_manifest(
    manifest_path,
) -> tuple[PatchPool, InstancePool, GridSpec, PoolConfig, LabelSchema]:
    """Rebuild pools from a manifest, loading each referenced scene once."""
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid manifest JSON: {exc}") from exc
    if doc.get("kind") != "scenemix-pool-manifest":
        raise FormatError(f"{manifest_path}: not a pool manifest")
    grid = GridSpec.from_dict(doc["grid"])
    config = PoolConfig(
        tau_min=int(doc["tau_min"]),
        capacity_per_index=doc.get("capacity_per_index"),
        seed=int(doc.get("seed", 0)),
    )
    schema = LabelSchema.from_dict(doc["schema"])
    root = manifest_path.parent

    patch_cache: dict[int, dict[int, Patch]] = {}

    def patches_of(scene_no: int) -> dict[int, Patch]:
        if scene_no not in patch_cache:
            ref = doc["scenes"][scene_no]
            scene = load_scene_kitti(
                root / ref["bin"], root / ref["label"], schema, scene_id=ref["id"]
            )
            patches, _ = patchify(scene, grid)
            patch_cache[scene_no] = {p.index: p for p in patches}
        return patch_cache[scene_no]

    patch_pool = PatchPool(SCOPE_LABELED, config)
    ins_pool = InstancePool(SCOPE_LABELED, config)
    for ref in doc["patches"]:
        lookup = patches_of(int(ref["scene"]))
        patch = lookup.get(int(ref["index"]))
        if patch is None:
            raise ConsistencyError(
                f"manifest references empty patch {ref['index']} of scene {ref['scene']}"
            )
        patch_pool.entries.setdefault(patch.index, []).append(patch)
    for ref in doc["instances"]:
        lookup = patches_of(int(ref["scene"]))
        patch = lookup.get(int(ref["index"]))
        if patch is None:
            raise ConsistencyError(
                f"manifest references empty patch {ref['index']} of scene {ref['scene']}"
            )
        wanted = [
            inst
            for inst in extract_instances(patch, schema, config.tau_min)
            if inst.class_id == int(ref["class_id"])
        ]
        if not wanted:
            raise ConsistencyError(
                f"manifest references missing instance class {ref['class_id']} "
                f"in patch {ref['index']} of scene {ref['scene']}"
            )
        ins_pool.entries.setdefault(patch.index, []).append(wanted[0])
    return patch_pool, ins_pool, grid, config, schema
