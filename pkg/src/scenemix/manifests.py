"""Human-readable dataset and split manifests wrapping the binary scene files."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .errors import FormatError, ValidationError
from .scene_model import Dataset, LabelSchema, Scene, SyntheticSpec, load_scene_kitti, save_scene

DATASET_KIND = "scenemix-dataset"
SPLIT_KIND = "scenemix-split"


def _dump_yaml(path: Path, doc: dict) -> None:
    path.write_text(yaml.safe_dump(doc, sort_keys=True, default_flow_style=False))


def _load_yaml(path: Path, kind: str) -> dict:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise FormatError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind} manifest")
    return doc


def save_dataset(
    root,
    scenes: Sequence[Scene],
    schema: LabelSchema,
    spec: Optional[SyntheticSpec] = None,
) -> Path:
    """Write scenes as bin/label pairs under ``root/scenes`` plus a manifest."""
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    entries = []
    for scene in scenes:
        if not scene.scene_id:
            raise ValidationError("every persisted scene needs a scene_id")
        bin_rel = f"scenes/{scene.scene_id}.bin"
        label_rel = f"scenes/{scene.scene_id}.label" if scene.has_labels else None
        save_scene(scene, root / bin_rel, None if label_rel is None else root / label_rel)
        entries.append({"id": scene.scene_id, "bin": bin_rel, "label": label_rel})
    doc = {
        "kind": DATASET_KIND,
        "schema": schema.to_dict(),
        "scenes": entries,
    }
    if spec is not None:
        doc["synthetic_spec"] = spec.to_dict()
    manifest = root / "dataset.yaml"
    _dump_yaml(manifest, doc)
    return manifest


def load_dataset(
    manifest_path, workers: int = 1
) -> tuple[Dataset, dict[str, tuple[str, Optional[str]]]]:
    """Load every scene referenced by a dataset manifest.

    Returns the dataset (no split applied) and a map from scene id to the
    (bin, label) paths relative to the manifest directory. Scene files are
    independent, so ``workers > 1`` loads them from a thread pool; the scene
    order always matches the manifest.
    """
    manifest_path = Path(manifest_path)
    doc = _load_yaml(manifest_path, DATASET_KIND)
    schema = LabelSchema.from_dict(doc["schema"])
    root = manifest_path.parent

    def load_one(ref) -> Scene:
        label_rel = ref.get("label")
        return load_scene_kitti(
            root / ref["bin"],
            None if label_rel is None else root / label_rel,
            schema,
            scene_id=ref["id"],
        )

    refs = doc["scenes"]
    if workers > 1 and len(refs) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            scenes = list(pool.map(load_one, refs))
    else:
        scenes = [load_one(ref) for ref in refs]
    files = {ref["id"]: (ref["bin"], ref.get("label")) for ref in refs}
    return Dataset(scenes=tuple(scenes), schema=schema), files


def save_split(
    path,
    dataset_manifest,
    ratio: float,
    seed: int,
    labeled_ids: Sequence[int],
    unlabeled_ids: Sequence[int],
) -> None:
    path = Path(path)
    rel = os.path.relpath(Path(dataset_manifest), path.parent)
    _dump_yaml(
        path,
        {
            "kind": SPLIT_KIND,
            "dataset": rel,
            "ratio": float(ratio),
            "seed": int(seed),
            "labeled_ids": [int(i) for i in labeled_ids],
            "unlabeled_ids": [int(i) for i in unlabeled_ids],
        },
    )


def load_split(path) -> dict:
    return _load_yaml(Path(path), SPLIT_KIND)


def apply_split(dataset: Dataset, split_doc: dict) -> Dataset:
    return Dataset(
        scenes=dataset.scenes,
        schema=dataset.schema,
        labeled_ids=tuple(split_doc["labeled_ids"]),
        unlabeled_ids=tuple(split_doc["unlabeled_ids"]),
    )
