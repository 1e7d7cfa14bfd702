"""CLI-facing configuration: a flat key set loadable from YAML with overrides.

Every pipeline constant is a named key with its default taken from the
method's reference values (tau_s 0.9, alpha 0.99, lambda 1, n 18, range
[-50, 50], tau_min 5).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import yaml

from .errors import FormatError, UsageError, ValidationError
from .mixing import MixConfig
from .patching import GridSpec, PoolConfig
from .scene_model import LabelSchema
from .ssl_harness import LossWeights, TrainConfig


@dataclass
class Settings:
    """Flat training/augmentation settings; field names are the config keys."""

    dataset: str = ""
    split: str = ""
    out_dir: str = "runs/out"

    grid_n: int = 18
    x_min: float = -50.0
    x_max: float = 50.0
    y_min: float = -50.0
    y_max: float = 50.0

    tau_s: float = 0.9
    ema_alpha: float = 0.99
    lambda_u: float = 1.0
    lambda_l: float = 1.0
    consistency_weight: float = 0.0
    tau_min: int = 5
    pool_capacity: Optional[int] = None
    pool_seed: int = 0

    rho_mix: float = 0.5
    p_fill: float = 0.5
    context_radius: Optional[float] = None
    context_min_points: int = 10

    lr: float = 0.5
    iterations: int = 2000
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    seed: int = 0
    use_unlabeled: bool = True
    use_pt_erase: bool = True
    use_mix_patch: bool = True
    use_ins_fill: bool = True
    workers: int = 1

    def grid(self) -> GridSpec:
        return GridSpec(self.grid_n, (self.x_min, self.x_max), (self.y_min, self.y_max))

    def pool_config(self) -> PoolConfig:
        return PoolConfig(self.tau_min, self.pool_capacity, self.pool_seed)

    def mix_config(self) -> MixConfig:
        return MixConfig(
            rho_mix=self.rho_mix,
            p_fill=self.p_fill,
            context_radius=self.context_radius,
            context_min_points=self.context_min_points,
            seed=self.seed,
        )

    def train_config(self, schema: LabelSchema) -> TrainConfig:
        return TrainConfig(
            schema=schema,
            grid=self.grid(),
            tau_s=self.tau_s,
            ema_alpha=self.ema_alpha,
            weights=LossWeights(self.lambda_u, self.lambda_l, self.consistency_weight),
            pool=self.pool_config(),
            mix=self.mix_config(),
            lr=self.lr,
            batch_labeled=self.batch_labeled,
            batch_unlabeled=self.batch_unlabeled,
            use_unlabeled=self.use_unlabeled,
            use_pt_erase=self.use_pt_erase,
            use_mix_patch=self.use_mix_patch,
            use_ins_fill=self.use_ins_fill,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(Settings)}


def _coerce(name: str, raw):
    """Coerce a YAML value or 'key=value' string onto the field's type."""
    field = _FIELDS.get(name)
    if field is None:
        raise UsageError(f"unknown config key {name!r}")
    text = raw if isinstance(raw, str) else None
    if field.type in ("Optional[int]", "Optional[float]"):
        if raw is None or text in ("none", "null", ""):
            return None
        return int(raw) if "int" in field.type else float(raw)
    if field.type == "bool":
        if isinstance(raw, bool):
            return raw
        if text is not None and text.lower() in ("1", "true", "yes", "on"):
            return True
        if text is not None and text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"cannot parse boolean for {name!r}: {raw!r}")
    if field.type == "int":
        return int(raw)
    if field.type == "float":
        return float(raw)
    return str(raw)


def load_settings(
    config_path: Optional[str] = None,
    overrides: Optional[list[str]] = None,
    **direct,
) -> Settings:
    """Config-file-first settings with flag overrides applied on top."""
    values: dict = {}
    if config_path:
        try:
            doc = yaml.safe_load(Path(config_path).read_text())
        except yaml.YAMLError as exc:
            raise FormatError(f"{config_path}: invalid YAML: {exc}") from exc
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise FormatError(f"{config_path}: config must be a mapping")
        for key, raw in doc.items():
            values[key] = _coerce(key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw.strip())
    for key, raw in direct.items():
        if raw is not None:
            values[key] = _coerce(key, raw)
    return Settings(**values)


def settings_help() -> str:
    lines = ["config keys (YAML file or --set key=value):"]
    for f in fields(Settings):
        default = f.default if f.default is not dataclasses.MISSING else ""
        lines.append(f"  {f.name} (default: {default})")
    return "\n".join(lines)
