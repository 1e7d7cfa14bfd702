"""Semi-supervised LiDAR segmentation toolkit.

Point erasure for intra-scene consistency, patch/instance pools for
multi-scene augmentation, and a teacher-student training harness that runs
end-to-end on synthetic data.
"""

from .erasure import (
    DEFAULT_TAU_S,
    ErasedScene,
    ErasureStats,
    PointProbs,
    PseudoLabels,
    erase,
    pseudo_label,
)
from .errors import (
    ConsistencyError,
    FormatError,
    NumericError,
    ScenemixError,
    ValidationError,
)
from .mixing import (
    AABB,
    MixConfig,
    MixMask,
    aabb_intersects,
    compute_aabb,
    ins_fill,
    mix_patch_labeled,
    mix_patch_unlabeled,
    sample_mask,
)
from .patching import (
    GridSpec,
    Instance,
    InstancePool,
    Patch,
    PatchPool,
    PoolConfig,
    build_labeled_pools,
    build_pseudo_pools,
    extract_instances,
    patchify,
)
from .scene_model import (
    Dataset,
    LabelSchema,
    Scene,
    SyntheticSpec,
    default_synthetic_schema,
    generate_synthetic_dataset,
    generate_synthetic_scene,
    load_scene_kitti,
    save_scene,
    split_dataset,
)
from .ssl_harness import (
    EmaConfig,
    IterationLog,
    LossWeights,
    Segmentor,
    ToySegmentor,
    TrainConfig,
    TrainState,
    consistency_loss,
    ema_update,
    evaluate_miou,
    run_training,
    seg_loss,
    total_loss,
    train_iteration,
)

__version__ = "0.1.0"
