"""Teacher-student training harness: EMA tracking, losses, toy segmentor, mIoU.

The harness runs the full pipeline at desk scale: the teacher pseudo-labels
unlabeled scenes, low-confidence points are erased, batch pools are rebuilt,
scenes are mixed and filled, and the student takes a gradient step on the
combined objective before the teacher absorbs it through EMA.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .erasure import (
    DEFAULT_TAU_S,
    ErasedScene,
    ErasureStats,
    PointProbs,
    PseudoLabels,
    erase,
    pseudo_label,
)
from .errors import ConsistencyError, FormatError, NumericError, ValidationError
from .mixing import MixConfig, ins_fill, mix_patch_labeled, mix_patch_unlabeled, sample_mask
from .patching import (
    GridSpec,
    InstancePool,
    PatchPool,
    PoolConfig,
    SCOPE_LABELED,
    SCOPE_PSEUDO,
    build_labeled_pools,
    build_pseudo_pools,
)
from .scene_model import Dataset, LabelSchema, Scene

DEFAULT_EMA_ALPHA = 0.99


class Segmentor(Protocol):
    """Anything with flat parameters that predicts per-point class distributions."""

    @property
    def params(self) -> np.ndarray: ...

    def set_params(self, params: np.ndarray) -> None: ...

    def predict(self, scene: Scene) -> PointProbs: ...

    def loss_and_grad(
        self, scene: Scene, labels: np.ndarray, point_weights: Optional[np.ndarray] = None
    ) -> tuple[float, np.ndarray]: ...


TOY_NUM_FEATURES = 5  # z, bev range / 10, log1p(voxel density), intensity, bias


class ToySegmentor:
    """Multinomial linear classifier over cheap per-point geometry features.

    Features per point: height z, BEV range scaled by 1/10, log1p of the
    point count in the point's own voxel (voxel-hash lookup), first extra
    feature (intensity, 0 when absent), and a constant bias. Features are a
    pure function of the scene, so predictions are deterministic.
    """

    def __init__(self, num_classes: int, voxel_size: float = 1.0):
        if num_classes < 2:
            raise ValidationError("need at least two classes")
        self.num_classes = num_classes
        self.voxel_size = voxel_size
        self._w = np.zeros((num_classes, TOY_NUM_FEATURES), dtype=np.float64)
        # optional cache for scenes that recur across iterations, keyed by
        # object identity; the owner must keep those scenes alive
        self.feature_cache: Optional[dict[int, np.ndarray]] = None

    @property
    def params(self) -> np.ndarray:
        return self._w.ravel().copy()

    def set_params(self, params: np.ndarray) -> None:
        params = np.asarray(params, dtype=np.float64)
        if params.size != self._w.size:
            raise ConsistencyError(
                f"expected {self._w.size} parameters, got {params.size}"
            )
        self._w = params.reshape(self.num_classes, TOY_NUM_FEATURES).copy()

    def clone(self) -> "ToySegmentor":
        out = ToySegmentor(self.num_classes, self.voxel_size)
        out.set_params(self.params)
        return out

    def features(self, scene: Scene) -> np.ndarray:
        if self.feature_cache is not None:
            cached = self.feature_cache.get(id(scene))
            if cached is not None and cached.shape[0] == scene.num_points:
                return cached
        m = scene.num_points
        coords = scene.coords.astype(np.float64)
        out = np.empty((m, TOY_NUM_FEATURES), dtype=np.float64)
        out[:, 0] = coords[:, 2]
        out[:, 1] = np.hypot(coords[:, 0], coords[:, 1]) / 10.0
        out[:, 2] = np.log1p(self._voxel_counts(coords))
        out[:, 3] = scene.feats[:, 0] if scene.num_feats > 0 else 0.0
        out[:, 4] = 1.0
        return out

    def _voxel_counts(self, coords: np.ndarray) -> np.ndarray:
        if coords.shape[0] == 0:
            return np.zeros(0, dtype=np.int64)
        cells = np.floor(coords / self.voxel_size).astype(np.int64)
        offset = 1 << 20  # coordinates stay far below ~1e6 m, so packing is exact
        key = ((cells[:, 0] + offset) << 42) | ((cells[:, 1] + offset) << 21) | (
            cells[:, 2] + offset
        )
        _, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
        return counts[inverse]

    def _probs(self, features: np.ndarray) -> np.ndarray:
        logits = features @ self._w.T
        logits -= logits.max(axis=1, keepdims=True) if logits.size else 0.0
        exp = np.exp(logits)
        return exp / exp.sum(axis=1, keepdims=True) if exp.size else exp

    def predict(self, scene: Scene) -> PointProbs:
        feats = self.features(scene)
        if feats.shape[0] == 0:
            return PointProbs(np.zeros((0, self.num_classes)))
        return PointProbs(self._probs(feats))

    def loss_and_grad(
        self, scene: Scene, labels: np.ndarray, point_weights: Optional[np.ndarray] = None
    ) -> tuple[float, np.ndarray]:
        """Weighted mean cross-entropy and its gradient w.r.t. the flat parameters."""
        labels = np.asarray(labels, dtype=np.int64)
        m = scene.num_points
        if labels.shape != (m,):
            raise ConsistencyError(f"labels shape {labels.shape} for {m} points")
        if m and ((labels < 0).any() or (labels >= self.num_classes).any()):
            raise ValidationError("label out of class range")
        if point_weights is None:
            weights = np.ones(m, dtype=np.float64)
        else:
            weights = np.asarray(point_weights, dtype=np.float64)
        total = weights.sum()
        if m == 0 or total == 0:
            return 0.0, np.zeros(self._w.size, dtype=np.float64)
        feats = self.features(scene)
        probs = self._probs(feats)
        p_true = probs[np.arange(m), labels]
        loss = float(np.sum(weights * -np.log(np.maximum(p_true, 1e-300))) / total)
        grad_logits = probs.copy()
        grad_logits[np.arange(m), labels] -= 1.0
        grad_logits *= (weights / total)[:, None]
        grad = grad_logits.T @ feats
        return loss, grad.ravel()

    def consistency_loss_and_grad(
        self, scene: Scene, target: PointProbs
    ) -> tuple[float, np.ndarray]:
        """Mean squared probability difference to a fixed target, with gradient."""
        m = scene.num_points
        if target.probs.shape != (m, self.num_classes):
            raise ConsistencyError("target probabilities do not match scene/classes")
        if m == 0:
            return 0.0, np.zeros(self._w.size, dtype=np.float64)
        feats = self.features(scene)
        probs = self._probs(feats)
        diff = probs - target.probs
        loss = float(np.mean(diff**2))
        g = 2.0 * diff / diff.size  # dL/dprobs
        # softmax backward per row: dz = p * (g - sum(g * p))
        grad_logits = probs * (g - np.sum(g * probs, axis=1, keepdims=True))
        grad = grad_logits.T @ feats
        return loss, grad.ravel()


def ema_update(teacher_params: np.ndarray, student_params: np.ndarray, alpha: float) -> np.ndarray:
    """Elementwise alpha * teacher + (1 - alpha) * student."""
    t = np.asarray(teacher_params, dtype=np.float64)
    s = np.asarray(student_params, dtype=np.float64)
    if t.shape != s.shape:
        raise ConsistencyError(f"parameter shapes differ: {t.shape} vs {s.shape}")
    return alpha * t + (1.0 - alpha) * s


def seg_loss(
    probs, labels: np.ndarray, ignore_class: Optional[int] = None
) -> tuple[float, np.ndarray]:
    """Mean negative log-probability of the true class over non-ignore points.

    Returns the loss and its gradient w.r.t. the probability entries. With no
    supervised points the loss is 0 and the gradient all-zero.
    """
    p = probs.probs if isinstance(probs, PointProbs) else np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    m, c = p.shape
    if labels.shape != (m,):
        raise ConsistencyError(f"labels shape {labels.shape} for {m} rows")
    if m and ((labels < 0).any() or (labels >= c).any()):
        raise ValidationError("label out of class range")
    grad = np.zeros_like(p)
    valid = np.ones(m, dtype=bool) if ignore_class is None else labels != ignore_class
    n_eff = int(valid.sum())
    if n_eff == 0:
        return 0.0, grad
    rows = np.flatnonzero(valid)
    p_true = p[rows, labels[rows]]
    loss = float(np.mean(-np.log(p_true)))
    grad[rows, labels[rows]] = -1.0 / (n_eff * p_true)
    return loss, grad


def consistency_loss(teacher_probs: PointProbs, student_probs: PointProbs) -> float:
    """Mean over points and classes of squared probability differences."""
    a, b = teacher_probs.probs, student_probs.probs
    if a.shape != b.shape:
        raise ConsistencyError(f"probability shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.mean((a - b) ** 2))


@dataclass(frozen=True)
class LossWeights:
    lambda_u: float = 1.0
    lambda_l: float = 1.0
    consistency_weight: float = 0.0

    def __post_init__(self):
        if min(self.lambda_u, self.lambda_l, self.consistency_weight) < 0:
            raise ValidationError("loss weights must be non-negative")


def total_loss(
    loss_s: float, loss_u: float, loss_l: float, weights: LossWeights, loss_cons: float = 0.0
) -> float:
    """Supervised + weighted unlabeled + weighted augmented-labeled (+ consistency)."""
    return (
        loss_s
        + weights.lambda_u * loss_u
        + weights.lambda_l * loss_l
        + weights.consistency_weight * loss_cons
    )


@dataclass(frozen=True)
class EmaConfig:
    alpha: float = DEFAULT_EMA_ALPHA
    step: int = 0

    def __post_init__(self):
        if not 0 <= self.alpha < 1:
            raise ValidationError("EMA alpha must be in [0, 1)")


@dataclass(frozen=True)
class IterationLog:
    step: int
    loss_s: float
    loss_l: float
    loss_u: float
    loss_total: float
    erase_fraction: float
    pool_sizes: dict[str, int]

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "loss_s": self.loss_s,
                "loss_l": self.loss_l,
                "loss_u": self.loss_u,
                "loss_total": self.loss_total,
                "erase_fraction": self.erase_fraction,
                "pool_sizes": self.pool_sizes,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json_line(cls, line: str) -> "IterationLog":
        d = json.loads(line)
        return cls(
            step=int(d["step"]),
            loss_s=float(d["loss_s"]),
            loss_l=float(d["loss_l"]),
            loss_u=float(d["loss_u"]),
            loss_total=float(d["loss_total"]),
            erase_fraction=float(d["erase_fraction"]),
            pool_sizes={k: int(v) for k, v in d["pool_sizes"].items()},
        )


@dataclass(frozen=True)
class TrainConfig:
    """Everything one iteration needs besides the data and the RNG."""

    schema: LabelSchema
    grid: GridSpec
    tau_s: float = DEFAULT_TAU_S
    ema_alpha: float = DEFAULT_EMA_ALPHA
    weights: LossWeights = field(default_factory=LossWeights)
    pool: PoolConfig = field(default_factory=PoolConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    lr: float = 0.5
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    use_unlabeled: bool = True
    use_pt_erase: bool = True
    use_mix_patch: bool = True
    use_ins_fill: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError("learning rate must be positive")
        if min(self.batch_labeled, self.batch_unlabeled) < 1:
            raise ValidationError("batch sizes must be >= 1")
        if not 0 <= self.ema_alpha < 1:
            raise ValidationError("EMA alpha must be in [0, 1)")

    @property
    def uses_augmentation(self) -> bool:
        return self.use_mix_patch or self.use_ins_fill


@dataclass
class TrainState:
    student: ToySegmentor
    teacher: ToySegmentor
    step: int = 0


@dataclass(frozen=True)
class LabeledPools:
    patches: PatchPool
    instances: InstancePool


def init_state(schema: LabelSchema, voxel_size: float = 1.0) -> TrainState:
    """Fresh student with the teacher starting as an identical copy."""
    student = ToySegmentor(schema.num_classes, voxel_size)
    return TrainState(student=student, teacher=student.clone(), step=0)


def _pseudo_scene(
    scene: Scene, pseudo: PseudoLabels, config: TrainConfig
) -> tuple[ErasedScene, float]:
    """Erased (or threshold-to-ignore) pseudo scene plus the low-confidence fraction."""
    ignore = config.schema.ignore_class_id
    below = pseudo.confidence < config.tau_s
    if ignore is not None:
        below |= pseudo.label == ignore
    fraction = float(below.mean()) if below.size else 0.0
    if config.use_pt_erase:
        return erase(scene, pseudo, config.tau_s, ignore_class=ignore), fraction
    if ignore is None:
        raise ValidationError("threshold-to-ignore path needs an ignore class")
    labels = np.where(below, np.int32(ignore), pseudo.label).astype(np.int32)
    kept = np.arange(scene.num_points, dtype=np.int64)
    stats = ErasureStats(total_points=scene.num_points, removed_points=0)
    return ErasedScene(scene.with_labels(labels), kept, stats), fraction


def _supervision_weights(labels: np.ndarray, schema: LabelSchema) -> np.ndarray:
    if schema.ignore_class_id is None:
        return np.ones(labels.shape[0], dtype=np.float64)
    return (labels != schema.ignore_class_id).astype(np.float64)


def train_iteration(
    state: TrainState,
    labeled_batch: Sequence[Scene],
    unlabeled_batch: Sequence[Scene],
    pools: LabeledPools,
    config: TrainConfig,
    rng: np.random.Generator,
) -> tuple[TrainState, IterationLog]:
    """One teacher-student step over an equal-composition mini-batch.

    Pipeline order: teacher predictions, pseudo-labels, erasure, batch pools,
    then per scene pair one shared mask, unlabeled mixing + filling, labeled
    mixing + filling, then the student update and the teacher EMA update.
    RNG draws happen in exactly that order, which makes runs with equal
    seeds bit-identical.
    """
    if not labeled_batch or (config.use_unlabeled and not unlabeled_batch):
        raise ValidationError("batches must be non-empty")
    if config.use_unlabeled and len(labeled_batch) != len(unlabeled_batch):
        raise ConsistencyError("labeled and unlabeled batches must be equal-sized")
    for scene in labeled_batch:
        if not scene.has_labels:
            raise ValidationError("labeled batch contains an unlabeled scene")
    schema = config.schema
    ignore = schema.ignore_class_id
    n_params = state.student.params.size

    erased: list[ErasedScene] = []
    teacher_probs: list[PointProbs] = []
    fractions: list[float] = []
    if config.use_unlabeled:
        for xu in unlabeled_batch:
            probs = state.teacher.predict(xu)
            teacher_probs.append(probs)
            es, fraction = _pseudo_scene(xu, pseudo_label(probs), config)
            erased.append(es)
            fractions.append(fraction)

    pseudo_patch: PatchPool
    pseudo_ins: InstancePool
    if config.use_unlabeled and config.uses_augmentation:
        pseudo_patch, pseudo_ins = build_pseudo_pools(
            erased, config.grid, config.pool, schema
        )
    else:
        pseudo_patch = PatchPool(SCOPE_PSEUDO, config.pool)
        pseudo_ins = InstancePool(SCOPE_PSEUDO, config.pool)

    unlabeled_aug: list[Scene] = []
    labeled_aug: list[Scene] = []
    if config.use_unlabeled:
        T = config.grid.total_patches
        for i, es in enumerate(erased):
            mask = sample_mask(T, config.mix.rho_mix, rng) if config.use_mix_patch else None
            xu_aug = es.scene
            if config.use_mix_patch:
                xu_aug = mix_patch_unlabeled(es, pools.patches, mask, config.grid, rng)
            if config.use_ins_fill:
                xu_aug = ins_fill(xu_aug, pools.instances, config.grid, config.mix, rng, schema)
            unlabeled_aug.append(xu_aug)
            if config.uses_augmentation:
                xl_aug = labeled_batch[i]
                if config.use_mix_patch:
                    xl_aug = mix_patch_labeled(xl_aug, pseudo_patch, mask, config.grid, rng)
                if config.use_ins_fill:
                    xl_aug = ins_fill(xl_aug, pseudo_ins, config.grid, config.mix, rng, schema)
                labeled_aug.append(xl_aug)

    student = state.student
    grad = np.zeros(n_params, dtype=np.float64)

    loss_s = 0.0
    for scene in labeled_batch:
        ls, gs = student.loss_and_grad(
            scene, scene.labels, _supervision_weights(scene.labels, schema)
        )
        loss_s += ls / len(labeled_batch)
        grad += gs / len(labeled_batch)

    loss_u = 0.0
    if unlabeled_aug:
        for scene in unlabeled_aug:
            lu, gu = student.loss_and_grad(
                scene, scene.labels, _supervision_weights(scene.labels, schema)
            )
            loss_u += lu / len(unlabeled_aug)
            grad += config.weights.lambda_u * gu / len(unlabeled_aug)

    loss_l = 0.0
    if labeled_aug:
        for scene in labeled_aug:
            ll, gl = student.loss_and_grad(
                scene, scene.labels, _supervision_weights(scene.labels, schema)
            )
            loss_l += ll / len(labeled_aug)
            grad += config.weights.lambda_l * gl / len(labeled_aug)

    loss_cons = 0.0
    if config.weights.consistency_weight > 0 and config.use_unlabeled:
        for xu, tprobs in zip(unlabeled_batch, teacher_probs):
            lc, gc = student.consistency_loss_and_grad(xu, tprobs)
            loss_cons += lc / len(unlabeled_batch)
            grad += config.weights.consistency_weight * gc / len(unlabeled_batch)

    loss = total_loss(loss_s, loss_u, loss_l, config.weights, loss_cons)
    if not np.isfinite(loss) or not np.isfinite(grad).all():
        raise NumericError(f"non-finite loss or gradient at step {state.step}")

    student.set_params(student.params - config.lr * grad)
    state.teacher.set_params(
        ema_update(state.teacher.params, student.params, config.ema_alpha)
    )
    state.step += 1

    log = IterationLog(
        step=state.step,
        loss_s=loss_s,
        loss_l=loss_l,
        loss_u=loss_u,
        loss_total=loss,
        erase_fraction=float(np.mean(fractions)) if fractions else 0.0,
        pool_sizes={
            "labeled_patches": pools.patches.total_entries(),
            "labeled_instances": pools.instances.total_entries(),
            "pseudo_patches": pseudo_patch.total_entries(),
            "pseudo_instances": pseudo_ins.total_entries(),
        },
    )
    return state, log


def run_training(
    dataset: Dataset,
    config: TrainConfig,
    iterations: int,
    seed: int,
    log_sink=None,
) -> tuple[TrainState, list[IterationLog]]:
    """Full training run; every logged number is a function of (dataset, config, seed)."""
    if iterations < 1:
        raise ValidationError("iterations must be >= 1")
    if not dataset.labeled_ids:
        raise ValidationError("dataset has no labeled scenes")
    if config.use_unlabeled and not dataset.unlabeled_ids:
        raise ValidationError("config uses unlabeled data but the split has none")

    labeled_scenes = [dataset.training_scene(i) for i in dataset.labeled_ids]
    unlabeled_scenes = [dataset.training_scene(i) for i in dataset.unlabeled_ids]

    state = init_state(config.schema)
    # these scenes recur every iteration and features depend only on the scene
    cache = {
        id(s): state.student.features(s) for s in (*labeled_scenes, *unlabeled_scenes)
    }
    state.student.feature_cache = cache
    state.teacher.feature_cache = cache

    if config.use_unlabeled and config.uses_augmentation:
        patch_pool, ins_pool = build_labeled_pools(
            labeled_scenes, config.grid, config.pool, config.schema
        )
    else:
        patch_pool = PatchPool(SCOPE_LABELED, config.pool)
        ins_pool = InstancePool(SCOPE_LABELED, config.pool)
    pools = LabeledPools(patch_pool, ins_pool)

    rng = np.random.default_rng(seed)
    logs: list[IterationLog] = []
    for _ in range(iterations):
        lab_idx = rng.choice(
            len(labeled_scenes),
            size=config.batch_labeled,
            replace=config.batch_labeled > len(labeled_scenes),
        )
        labeled_batch = [labeled_scenes[int(i)] for i in lab_idx]
        if config.use_unlabeled:
            unlab_idx = rng.choice(
                len(unlabeled_scenes),
                size=config.batch_unlabeled,
                replace=config.batch_unlabeled > len(unlabeled_scenes),
            )
            unlabeled_batch = [unlabeled_scenes[int(i)] for i in unlab_idx]
        else:
            unlabeled_batch = []
        state, log = train_iteration(state, labeled_batch, unlabeled_batch, pools, config, rng)
        logs.append(log)
        if log_sink is not None:
            log_sink(log)
    # the cache is only valid while this run's scene objects are alive
    state.student.feature_cache = None
    state.teacher.feature_cache = None
    return state, logs


def evaluate_miou(
    segmentor: Segmentor, eval_scenes: Sequence[Scene], schema: LabelSchema
) -> tuple[np.ndarray, float]:
    """Per-class IoU from a confusion matrix pooled over scenes, and its mean.

    Ground-truth ignore points are excluded; classes with zero union (and the
    ignore class itself) are NaN in the vector and excluded from the mean.
    """
    c = schema.num_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    for scene in eval_scenes:
        if not scene.has_labels:
            raise ValidationError("evaluation scenes must carry labels")
        if scene.num_points == 0:
            continue
        pred = pseudo_label(segmentor.predict(scene)).label.astype(np.int64)
        gt = scene.labels.astype(np.int64)
        valid = np.ones(gt.shape[0], dtype=bool)
        if schema.ignore_class_id is not None:
            valid = gt != schema.ignore_class_id
        idx = gt[valid] * c + pred[valid]
        confusion += np.bincount(idx, minlength=c * c).reshape(c, c)
    if confusion.sum() == 0:
        raise ValidationError("no evaluable points")
    tp = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - np.diag(confusion)
    iou = np.full(c, np.nan)
    nonzero = union > 0
    iou[nonzero] = tp[nonzero] / union[nonzero]
    if schema.ignore_class_id is not None:
        iou[schema.ignore_class_id] = np.nan
    if np.isnan(iou).all():
        raise ValidationError("no class has a nonzero union")
    return iou, float(np.nanmean(iou))


CHECKPOINT_MAGIC = b"SMCKPT01"


def save_checkpoint(path, student_params: np.ndarray, teacher_params: np.ndarray, config_hash: str) -> None:
    """Binary little-endian checkpoint: magic, count, config hash, both parameter vectors."""
    s = np.asarray(student_params, dtype="<f8").ravel()
    t = np.asarray(teacher_params, dtype="<f8").ravel()
    if s.size != t.size:
        raise ConsistencyError("student and teacher parameter counts differ")
    if len(config_hash) != 64:
        raise ValidationError("config hash must be a 64-char sha256 hex digest")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", s.size))
        fh.write(config_hash.encode("ascii"))
        fh.write(s.tobytes())
        fh.write(t.tobytes())


def load_checkpoint(path) -> tuple[np.ndarray, np.ndarray, str]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", blob[8:16])
    config_hash = blob[16:80].decode("ascii")
    expected = 80 + 2 * 8 * n
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    student = np.frombuffer(blob, dtype="<f8", count=n, offset=80).copy()
    teacher = np.frombuffer(blob, dtype="<f8", count=n, offset=80 + 8 * n).copy()
    return student, teacher, config_hash


def config_fingerprint(payload: dict) -> str:
    """Stable sha256 over a JSON-serializable config mapping."""
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()
