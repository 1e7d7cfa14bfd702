"""Complementary patch mixing against pools, and overlap-checked instance filling.

The same binary mask drives both mixing directions: patches the unlabeled
branch keeps are exactly the patches the labeled branch replaces, so pooled
content appears in exactly one of the two outputs per index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConsistencyError, ValidationError
from .erasure import ErasedScene
from .patching import GridSpec, InstancePool, PatchPool
from .scene_model import LabelSchema, Scene

DEFAULT_RHO_MIX = 0.5
DEFAULT_P_FILL = 0.5
DEFAULT_CONTEXT_MIN_POINTS = 10

# provenance branch tags
PROV_BASE = 0
PROV_POOL_PATCH = 1
PROV_FILLED = 2


@dataclass(frozen=True)
class MixMask:
    """keep[j] is true when patch j stays with the base scene of Eq.-5-style mixing."""

    keep: np.ndarray  # (T,) bool

    def __post_init__(self):
        keep = np.ascontiguousarray(np.asarray(self.keep, dtype=bool))
        if keep.ndim != 1:
            raise ValidationError("mask must be one-dimensional")
        object.__setattr__(self, "keep", keep)

    def __len__(self) -> int:
        return self.keep.shape[0]


@dataclass(frozen=True)
class MixConfig:
    """Knobs of mixing and filling; the paper fixes only the uniform sampling."""

    rho_mix: float = DEFAULT_RHO_MIX
    p_fill: float = DEFAULT_P_FILL
    context_radius: Optional[float] = None  # None: 2x the larger BEV cell side
    context_min_points: int = DEFAULT_CONTEXT_MIN_POINTS
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.rho_mix <= 1:
            raise ValidationError("rho_mix must be in [0, 1]")
        if not 0 <= self.p_fill <= 1:
            raise ValidationError("p_fill must be in [0, 1]")
        if self.context_radius is not None and self.context_radius <= 0:
            raise ValidationError("context_radius must be positive when set")
        if self.context_min_points < 0:
            raise ValidationError("context_min_points must be non-negative")

    def resolved_context_radius(self, grid: GridSpec) -> float:
        if self.context_radius is not None:
            return self.context_radius
        side_x, side_y = grid.cell_size
        return 2.0 * max(side_x, side_y)

    def to_dict(self) -> dict:
        return {
            "rho_mix": self.rho_mix,
            "p_fill": self.p_fill,
            "context_radius": self.context_radius,
            "context_min_points": self.context_min_points,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class AABB:
    min_corner: np.ndarray  # (3,)
    max_corner: np.ndarray  # (3,)

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if (lo > hi).any():
            raise ValidationError("AABB min corner exceeds max corner")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @property
    def center(self) -> np.ndarray:
        return (self.min_corner + self.max_corner) / 2.0


def compute_aabb(points: np.ndarray) -> AABB:
    """Componentwise min/max box of a non-empty point set."""
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        raise ValidationError("cannot compute a bounding box of zero points")
    return AABB(points.min(axis=0), points.max(axis=0))


def aabb_intersects(a: AABB, b: AABB) -> bool:
    """Closed-interval overlap on all three axes; shared faces count as overlap."""
    return bool(
        (a.min_corner <= b.max_corner).all() and (b.min_corner <= a.max_corner).all()
    )


def sample_mask(T: int, rho_mix: float, rng: np.random.Generator) -> MixMask:
    """Mark exactly round(rho_mix * T) uniformly chosen indices as replaced."""
    if T < 1:
        raise ValidationError("T must be >= 1")
    n_replace = int(round(rho_mix * T))
    keep = np.ones(T, dtype=bool)
    if n_replace > 0:
        replaced = rng.choice(T, size=n_replace, replace=False)
        keep[replaced] = False
    return MixMask(keep)


@dataclass
class MixProvenance:
    """Per-point origin of a mixed/filled scene.

    branch: PROV_BASE, PROV_POOL_PATCH or PROV_FILLED per point.
    source: index into source_ids for pool-sourced points, -1 for base points.
    """

    branch: np.ndarray  # (m,) int32
    source: np.ndarray  # (m,) int32
    source_ids: list[str]


def _source_index(source_ids: list[str], scene_id: str) -> int:
    try:
        return source_ids.index(scene_id)
    except ValueError:
        source_ids.append(scene_id)
        return len(source_ids) - 1


def mix_with_pool(
    base: Scene,
    pool: PatchPool,
    replace: np.ndarray,
    grid: GridSpec,
    rng: np.random.Generator,
) -> tuple[Scene, MixProvenance]:
    """Swap the flagged patches of ``base`` for same-index pool entries.

    Base points in kept patches and out-of-range base points pass through in
    their original order; substituted patch points follow in ascending index
    order. A replaced index with no pool entry falls back to the base patch.
    One ``rng.integers`` draw selects the entry for each replaced index that
    has entries, in ascending index order.
    """
    if not base.has_labels:
        raise ValidationError("mixing needs a labeled (or erased) base scene")
    replace = np.asarray(replace, dtype=bool)
    if replace.shape != (grid.total_patches,):
        raise ConsistencyError(
            f"mask length {replace.shape} does not match T={grid.total_patches}"
        )
    cells = grid.assign(base.coords)
    in_range = cells >= 0
    effective_replace = replace.copy()
    substituted = []
    for j in np.flatnonzero(replace):
        entries = pool.get(int(j))
        if entries:
            k = int(rng.integers(len(entries)))
            substituted.append(entries[k])
        else:
            effective_replace[j] = False  # no pool entry: fall back to the base patch
    base_keep = np.ones(base.num_points, dtype=bool)
    base_keep[in_range] = ~effective_replace[cells[in_range]]

    kept_idx = np.flatnonzero(base_keep)
    coords = [base.coords[kept_idx]]
    feats = [base.feats[kept_idx]]
    labels = [base.labels[kept_idx]]
    source_ids: list[str] = []
    sub_sizes = np.array([p.num_points for p in substituted], dtype=np.int64)
    sub_sources = np.array(
        [_source_index(source_ids, p.source_scene) for p in substituted], dtype=np.int32
    )
    for patch in substituted:
        coords.append(patch.coords)
        feats.append(patch.feats)
        labels.append(patch.labels)
    n_sub = int(sub_sizes.sum())
    branch = np.concatenate(
        [
            np.full(kept_idx.size, PROV_BASE, dtype=np.int32),
            np.full(n_sub, PROV_POOL_PATCH, dtype=np.int32),
        ]
    )
    source = np.concatenate(
        [
            np.full(kept_idx.size, -1, dtype=np.int32),
            np.repeat(sub_sources, sub_sizes),
        ]
    )
    scene = Scene(
        np.concatenate(coords, axis=0),
        np.concatenate(feats, axis=0),
        np.concatenate(labels),
        base.scene_id,
    )
    return scene, MixProvenance(branch, source, source_ids)


def mix_patch_unlabeled(
    erased: ErasedScene,
    pool: PatchPool,
    mask: MixMask,
    grid: GridSpec,
    rng: np.random.Generator,
) -> Scene:
    """Erased scene keeps its masked-keep patches; the rest come from the labeled pool."""
    scene, _ = mix_with_pool(erased.scene, pool, ~mask.keep, grid, rng)
    return scene


def mix_patch_labeled(
    labeled: Scene,
    pseudo_pool: PatchPool,
    mask: MixMask,
    grid: GridSpec,
    rng: np.random.Generator,
) -> Scene:
    """Complement of the unlabeled direction: pool content lands where the mask kept."""
    scene, _ = mix_with_pool(labeled, pseudo_pool, mask.keep, grid, rng)
    return scene


def _thing_group_boxes(
    scene: Scene, grid: GridSpec, schema: LabelSchema
) -> tuple[np.ndarray, np.ndarray]:
    """AABBs of per-patch per-thing-class point groups, as (mins, maxs) arrays."""
    empty = (np.zeros((0, 3)), np.zeros((0, 3)))
    if scene.num_points == 0 or scene.labels is None or not schema.thing_class_ids:
        return empty
    thing_lut = np.zeros(schema.num_classes, dtype=bool)
    thing_lut[list(schema.thing_class_ids)] = True
    cells = grid.assign(scene.coords)
    members = np.flatnonzero(thing_lut[scene.labels] & (cells >= 0))
    if members.size == 0:
        return empty
    # group key = (cell, class); reduceat over the key-sorted coordinates
    key = cells[members] * schema.num_classes + scene.labels[members]
    order = members[np.argsort(key, kind="stable")]
    sorted_key = cells[order] * schema.num_classes + scene.labels[order]
    starts = np.flatnonzero(np.r_[True, sorted_key[1:] != sorted_key[:-1]])
    pts = scene.coords[order].astype(np.float64)
    mins = np.minimum.reduceat(pts, starts, axis=0)
    maxs = np.maximum.reduceat(pts, starts, axis=0)
    return mins, maxs


def ins_fill(
    scene: Scene,
    ins_pool: InstancePool,
    grid: GridSpec,
    config: MixConfig,
    rng: np.random.Generator,
    schema: LabelSchema,
) -> Scene:
    filled, _ = ins_fill_traced(scene, ins_pool, grid, config, rng, schema)
    return filled


def ins_fill_traced(
    scene: Scene,
    ins_pool: InstancePool,
    grid: GridSpec,
    config: MixConfig,
    rng: np.random.Generator,
    schema: LabelSchema,
    provenance: Optional[MixProvenance] = None,
) -> tuple[Scene, MixProvenance]:
    """Append same-index pool instances where they fit; all failures skip silently.

    For every patch index j in [0, T) an attempt fires with probability
    p_fill (one ``rng.random(T)`` vector drawn up front). An attempted index
    with pool entries consumes one ``rng.integers`` draw to pick the
    candidate, which is appended unless
      (a) its AABB intersects the AABB of any existing thing-class group
          (per-patch per-class groups of the base scene, plus instances
          already filled into this scene), or
      (b) fewer than context_min_points base-scene points lie within
          context_radius (BEV distance) of the candidate's BEV box center.
    Appended points keep the instance's class label and source coordinates.
    """
    if not scene.has_labels:
        raise ValidationError("instance filling needs a labeled scene")
    T = grid.total_patches
    radius = config.resolved_context_radius(grid)
    box_mins, box_maxs = _thing_group_boxes(scene, grid, schema)

    # draws first (one uniform vector, then one pick per attempted index with
    # entries, ascending): candidate selection never depends on acceptance
    attempts = rng.random(T)
    candidates = []
    for j in np.flatnonzero(attempts < config.p_fill):
        entries = ins_pool.get(int(j))
        if not entries:
            continue
        k = int(rng.integers(len(entries)))
        candidates.append(entries[k])

    added = []
    if candidates:
        cand_mins = np.stack([inst.aabb_min for inst in candidates])
        cand_maxs = np.stack([inst.aabb_max for inst in candidates])
        centers = (cand_mins[:, :2] + cand_maxs[:, :2]) / 2.0
        if scene.num_points:
            base_xy = scene.coords[:, :2].astype(np.float64)
            dx = centers[:, 0:1] - base_xy[None, :, 0]
            dy = centers[:, 1:2] - base_xy[None, :, 1]
            near_counts = np.count_nonzero(dx * dx + dy * dy <= radius * radius, axis=1)
        else:
            near_counts = np.zeros(len(candidates), dtype=np.int64)
        # obstacle boxes grow as fills are accepted; preallocate the worst case
        n_base = box_mins.shape[0]
        boxes_lo = np.empty((n_base + len(candidates), 3))
        boxes_hi = np.empty_like(boxes_lo)
        boxes_lo[:n_base] = box_mins
        boxes_hi[:n_base] = box_maxs
        n_boxes = n_base
        for c, inst in enumerate(candidates):
            if near_counts[c] < config.context_min_points:
                continue
            overlap = np.all(boxes_lo[:n_boxes] <= cand_maxs[c], axis=1) & np.all(
                cand_mins[c] <= boxes_hi[:n_boxes], axis=1
            )
            if overlap.any():
                continue
            added.append(inst)
            boxes_lo[n_boxes] = cand_mins[c]
            boxes_hi[n_boxes] = cand_maxs[c]
            n_boxes += 1

    if provenance is None:
        provenance = MixProvenance(
            np.full(scene.num_points, PROV_BASE, dtype=np.int32),
            np.full(scene.num_points, -1, dtype=np.int32),
            [],
        )
    if not added:
        return scene, provenance

    source_ids = list(provenance.source_ids)
    sizes = np.array([inst.num_points for inst in added], dtype=np.int64)
    classes = np.array([inst.class_id for inst in added], dtype=np.int32)
    sources = np.array(
        [_source_index(source_ids, inst.source_scene) for inst in added], dtype=np.int32
    )
    n_added = int(sizes.sum())
    out = Scene(
        np.concatenate([scene.coords] + [inst.coords for inst in added], axis=0),
        np.concatenate([scene.feats] + [inst.feats for inst in added], axis=0),
        np.concatenate([scene.labels, np.repeat(classes, sizes)]),
        scene.scene_id,
    )
    prov = MixProvenance(
        np.concatenate([provenance.branch, np.full(n_added, PROV_FILLED, dtype=np.int32)]),
        np.concatenate([provenance.source, np.repeat(sources, sizes)]),
        source_ids,
    )
    return out, prov
