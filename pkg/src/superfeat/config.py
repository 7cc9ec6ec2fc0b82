"""Declarative run configuration.

A run is described by a single YAML file (or nothing, for defaults).
Unknown keys are rejected, every value is range-checked, and the resolved
configuration has a stable content hash that names the run directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class DataConfig:
    train_classes: int = 20
    train_images_per_class: int = 4
    val_classes: int = 6
    val_images_per_class: int = 4
    eval_classes: int = 10
    eval_images_per_class: int = 5
    image_size: int = 64


@dataclass
class EncoderConfig:
    dim: int = 256           # output channels D of the local-feature map
    base_channels: int = 32
    min_side: int = 16       # smallest admissible resized image side


@dataclass
class TemplatesConfig:
    count: int = 32          # N, number of ordered features per image
    dim: int = 256           # d, template / projection width
    iterations: int = 3      # T, refinement steps (shared parameters)
    update: str = "residual"  # "residual" or "gated"
    init_std: float = 0.02


@dataclass
class WhiteningConfig:
    out_dim: int = 128


@dataclass
class LossConfig:
    margin_global: float = 0.75
    margin_super: float = 1.1
    weight_super: float = 0.02
    weight_attn: float = 0.1
    ratio_tau: float = 0.9
    ratio_direction: str = "standard-lowe"  # or "as-printed"
    use_global: bool = False
    use_super: bool = True
    use_attn: bool = True


@dataclass
class MatchConfig:
    reciprocal: bool = True
    ratio: bool = True
    same_id: bool = True


@dataclass
class TrainConfig:
    epochs: int = 30
    batches_per_epoch: int = 50
    tuples_per_batch: int = 5
    negatives: int = 5
    learning_rate: float = 3e-5
    lr_decay: float = 0.99
    weight_decay: float = 1e-4
    flip_augment: bool = True
    dtype: str = "float32"   # "float64" for the bit-exact 64-bit contracts
    val_every: int = 5
    val_codebook_size: int = 64


@dataclass
class RetrievalConfig:
    scales: list[float] = field(
        default_factory=lambda: [2.0, 1.414, 1.0, 0.707, 0.5, 0.353, 0.25])
    budget: int = 100
    codebook_size: int = 1024
    kmeans_iterations: int = 25
    selectivity_alpha: float = 3.0
    selectivity_threshold: float = 0.0


@dataclass
class DiagnosticsConfig:
    redundancy_ks: list[int] = field(default_factory=lambda: [1, 2, 4, 8, 16])
    heatmap_ids: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    budget_sweep: list[int] = field(default_factory=lambda: [25, 50, 100])


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    templates: TemplatesConfig = field(default_factory=TemplatesConfig)
    whitening: WhiteningConfig = field(default_factory=WhiteningConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)


_SECTION_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(value, target, key):
    """Coerce a parsed YAML scalar to the annotated field type."""
    if target is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if target is int and isinstance(value, bool):
        raise ConfigError(f"config key '{key}': expected int, got bool")
    if target is bool and not isinstance(value, bool):
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"config key '{key}': expected bool, got {value!r}")
    return value


def _build_section(cls, data: dict, prefix: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
        ftype = known[key].type
        if ftype in ("int", int):
            value = _coerce(value, int, prefix + key)
            if not isinstance(value, int):
                raise ConfigError(f"config key '{prefix}{key}': expected int")
        elif ftype in ("float", float):
            value = _coerce(value, float, prefix + key)
            if not isinstance(value, float):
                raise ConfigError(f"config key '{prefix}{key}': expected float")
        elif ftype in ("bool", bool):
            value = _coerce(value, bool, prefix + key)
        elif ftype in ("str", str):
            if not isinstance(value, str):
                raise ConfigError(f"config key '{prefix}{key}': expected string")
        elif isinstance(ftype, str) and ftype.startswith("list"):
            if not isinstance(value, list):
                raise ConfigError(f"config key '{prefix}{key}': expected list")
            elem = float if "float" in ftype else int
            value = [_coerce(v, elem, prefix + key) for v in value]
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig from a nested mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    kwargs = {}
    for key, value in data.items():
        if key == "seed":
            kwargs["seed"] = _coerce(value, int, "seed")
        elif key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{key}': expected a mapping")
            cls = RunConfig.__dataclass_fields__[key].default_factory  # type: ignore[union-attr]
            kwargs[key] = _build_section(cls, value, key + ".")
        else:
            raise ConfigError(f"unknown config key '{key}'")
    cfg = RunConfig(**kwargs)
    validate_config(cfg)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    """Load a YAML config file; None yields package defaults."""
    if path is None:
        cfg = RunConfig()
        validate_config(cfg)
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file not parseable: {exc}") from exc
    return config_from_dict(data)


def _parse_override_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply dotted-key overrides ("train.epochs=5") on top of a config."""
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        node = data
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key '{dotted}'")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key '{dotted}'")
        node[parts[-1]] = _parse_override_value(raw)
    return config_from_dict(data)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: RunConfig) -> str:
    """Stable short hash of the resolved configuration."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _check(cond: bool, key: str, message: str):
    if not cond:
        raise ConfigError(f"config key '{key}': {message}")


def validate_config(cfg: RunConfig):
    """Range-check every value against the owning module's contract."""
    _check(cfg.seed >= 0, "seed", "must be >= 0")

    d = cfg.data
    _check(d.train_classes >= 2, "data.train_classes", "must be >= 2")
    _check(d.train_images_per_class >= 2, "data.train_images_per_class", "must be >= 2")
    _check(d.val_classes >= 2, "data.val_classes", "must be >= 2")
    _check(d.val_images_per_class >= 2, "data.val_images_per_class", "must be >= 2")
    _check(d.eval_classes >= 2, "data.eval_classes", "must be >= 2")
    _check(d.eval_images_per_class >= 2, "data.eval_images_per_class", "must be >= 2")
    _check(d.image_size >= 16, "data.image_size", "must be >= 16")

    e = cfg.encoder
    _check(e.dim >= 1, "encoder.dim", "must be >= 1")
    _check(e.base_channels >= 1, "encoder.base_channels", "must be >= 1")
    _check(e.min_side >= 8, "encoder.min_side", "must be >= 8")

    t = cfg.templates
    _check(t.count >= 1, "templates.count", "must be >= 1")
    _check(t.dim >= 2, "templates.dim", "must be >= 2")
    _check(t.iterations >= 1, "templates.iterations", "must be >= 1")
    _check(t.update in ("residual", "gated"), "templates.update",
           "must be 'residual' or 'gated'")
    _check(t.init_std > 0, "templates.init_std", "must be > 0")

    w = cfg.whitening
    _check(w.out_dim >= 1, "whitening.out_dim", "must be >= 1")
    _check(w.out_dim <= min(cfg.encoder.dim, cfg.templates.dim), "whitening.out_dim",
           "must not exceed encoder.dim or templates.dim")

    lo = cfg.loss
    _check(lo.margin_global > 0, "loss.margin_global", "must be > 0")
    _check(lo.margin_super > 0, "loss.margin_super", "must be > 0")
    _check(lo.weight_super >= 0, "loss.weight_super", "must be >= 0")
    _check(lo.weight_attn >= 0, "loss.weight_attn", "must be >= 0")
    _check(0 < lo.ratio_tau <= 1, "loss.ratio_tau", "must be in (0, 1]")
    _check(lo.ratio_direction in ("standard-lowe", "as-printed"),
           "loss.ratio_direction", "must be 'standard-lowe' or 'as-printed'")

    tr = cfg.train
    _check(tr.epochs >= 1, "train.epochs", "must be >= 1")
    _check(tr.batches_per_epoch >= 1, "train.batches_per_epoch", "must be >= 1")
    _check(tr.tuples_per_batch >= 1, "train.tuples_per_batch", "must be >= 1")
    _check(tr.negatives >= 1, "train.negatives", "must be >= 1")
    _check(tr.learning_rate >= 0, "train.learning_rate", "must be >= 0")
    _check(0 < tr.lr_decay <= 1, "train.lr_decay", "must be in (0, 1]")
    _check(tr.weight_decay >= 0, "train.weight_decay", "must be >= 0")
    _check(tr.dtype in ("float32", "float64"), "train.dtype",
           "must be 'float32' or 'float64'")
    _check(tr.val_every >= 1, "train.val_every", "must be >= 1")
    _check(tr.val_codebook_size >= 2, "train.val_codebook_size", "must be >= 2")

    r = cfg.retrieval
    _check(len(r.scales) > 0, "retrieval.scales", "must be non-empty")
    _check(all(0 < s <= 4 for s in r.scales), "retrieval.scales",
           "every scale must be in (0, 4]")
    _check(r.budget >= 1, "retrieval.budget", "must be >= 1")
    _check(r.codebook_size >= 2, "retrieval.codebook_size", "must be >= 2")
    _check(r.kmeans_iterations >= 1, "retrieval.kmeans_iterations", "must be >= 1")
    _check(r.selectivity_alpha > 0, "retrieval.selectivity_alpha", "must be > 0")
    _check(-1.0 <= r.selectivity_threshold < 1.0, "retrieval.selectivity_threshold",
           "must be in [-1, 1)")

    g = cfg.diagnostics
    _check(all(k >= 1 for k in g.redundancy_ks), "diagnostics.redundancy_ks",
           "every K must be >= 1")
    _check(all(i >= 0 for i in g.heatmap_ids), "diagnostics.heatmap_ids",
           "ids must be >= 0")
    _check(all(b >= 1 for b in g.budget_sweep), "diagnostics.budget_sweep",
           "budgets must be >= 1")
