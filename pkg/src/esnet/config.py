"""Run configuration: schema, defaults, file loading, dotted overrides.

A run config is a JSON object with a ``schema_version`` plus nested sections.
Unknown keys are rejected. Defaults follow the published training recipe
wherever one exists (marked ``recipe`` in the key table); everything else is
an artifact choice (``tool``). Command-line overrides use dotted key paths
(``besm.mode off``, ``train.epochs 40``) and shadow the file; the effective
configuration is echoed into the run directory.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .besm import BesmConfig, RandomErasingParams
from .data import NORMALIZE_MEAN, NORMALIZE_STD, SamplerConfig
from .errors import ConfigError
from .model import BackboneConfig, HeadConfig
from .trainer import TrainConfig

SCHEMA_VERSION = 1

# (dotted key, default, origin, description); origin "recipe" marks values
# taken from the published training recipe, "tool" marks artifact choices.
KEY_TABLE = [
    ("schema_version", SCHEMA_VERSION, "tool", "config schema version"),
    ("seed", 0, "tool", "global seed for parameters, sampling, augmentation, erasing"),
    ("pooling", "ppool", "recipe", "ESB head pooling: gap | gmp | ppool"),
    ("data.root", None, "tool", "dataset root with train/ query/ gallery/"),
    ("data.input_size", [384, 128], "recipe", "input (H, W); person preset 384x128, vehicle 256x256"),
    ("data.normalize_mean", list(NORMALIZE_MEAN), "tool", "channel normalization mean"),
    ("data.normalize_std", list(NORMALIZE_STD), "tool", "channel normalization std"),
    ("model.stage_channels", [32, 64, 128, 256], "tool", "conv stage widths (desk-scale backbone)"),
    ("model.stem_stages", 2, "recipe", "stages shared by both branches (split before the later stages)"),
    ("model.last_stage_stride", 1, "recipe", "stride of the final stage"),
    ("model.embedding_dim", 128, "tool", "per-branch embedding size"),
    ("model.bn_neck", True, "recipe", "BN bottleneck between triplet feature and classifier"),
    ("model.aib_pooling", "gap", "recipe", "AIB head pooling"),
    ("train.epochs", 120, "recipe", "training epochs"),
    ("train.base_lr", 3.5e-4, "recipe", "peak learning rate"),
    ("train.warmup_epochs", 10, "recipe", "linear warmup length"),
    ("train.decay_epochs", [40, 70], "recipe", "epochs where the rate decays"),
    ("train.decay_factor", 0.1, "recipe", "decay multiplier"),
    ("train.weight_decay", 5e-4, "recipe", "optimizer weight decay"),
    ("train.optimizer", "adam", "recipe", "optimizer"),
    ("train.margin", 0.3, "recipe", "triplet margin"),
    ("train.checkpoint_every", 10, "tool", "checkpoint cadence in epochs"),
    ("besm.R", 0.10, "recipe", "erase ratio (fraction of image pixels); vehicle preset 0.20"),
    ("besm.P", 0.3, "recipe", "per-image erase probability; vehicle preset 0.5"),
    ("besm.layer", "esb.stage4", "recipe", "tap for salient maps (final ESB stage)"),
    ("besm.mode", "cgram", "tool", "cgram | gradcam | random | off"),
    ("random_erasing.probability", 0.5, "tool", "random-erasing baseline trigger probability"),
    ("random_erasing.area_range", [0.02, 0.4], "tool", "random-erasing area fraction range"),
    ("random_erasing.aspect_range", [0.3, 3.3333333333333335], "tool", "random-erasing aspect range"),
    ("sampler.J", 16, "recipe", "identities per batch"),
    ("sampler.K", 4, "recipe", "instances per identity"),
]


def default_config() -> dict:
    cfg: dict = {}
    for key, default, _, _ in KEY_TABLE:
        _set_path(cfg, key, copy.deepcopy(default), create=True)
    return cfg


def key_help_table() -> str:
    lines = ["config keys (override with --<key> <value>):"]
    for key, default, origin, desc in KEY_TABLE:
        lines.append(f"  {key:28s} default={json.dumps(default):20s} [{origin}] {desc}")
    return "\n".join(lines)


def _set_path(cfg: dict, dotted: str, value, create: bool = False) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        if part not in node:
            if not create:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[part] = {}
        node = node[part]
    if not create and parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def _get_path(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


def _merge_checked(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a section")
            _merge_checked(base[key], value, prefix=f"{path}.")
        else:
            base[key] = value


def load_config(path=None, overrides: list[tuple[str, str]] | None = None) -> dict:
    """Defaults, optionally updated from a JSON file, then dotted overrides."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        version = loaded.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}; expected {SCHEMA_VERSION}")
        _merge_checked(cfg, loaded)
    for key, raw in overrides or []:
        apply_override(cfg, key, raw)
    return cfg


def apply_override(cfg: dict, dotted: str, raw: str) -> None:
    """Set one dotted key from a command-line string, coercing to JSON types."""
    try:
        current = _get_path(cfg, dotted)
    except (KeyError, TypeError):
        raise ConfigError(f"unknown config key {dotted!r}") from None
    if isinstance(current, dict):
        raise ConfigError(f"config key {dotted!r} is a section, not a value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings like gmp or esb.stage4
    _set_path(cfg, dotted, value)


def echo_config(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True))


# ---- section builders -------------------------------------------------------


def make_backbone_config(cfg: dict) -> BackboneConfig:
    return BackboneConfig(
        stage_channels=tuple(cfg["model"]["stage_channels"]),
        stem_stages=cfg["model"]["stem_stages"],
        input_size=tuple(cfg["data"]["input_size"]),
        last_stage_stride=cfg["model"]["last_stage_stride"],
    )


def make_head_configs(cfg: dict) -> tuple[HeadConfig, HeadConfig]:
    common = dict(embedding_dim=cfg["model"]["embedding_dim"], bn_neck=cfg["model"]["bn_neck"])
    aib = HeadConfig(pooling=cfg["model"]["aib_pooling"], **common)
    esb = HeadConfig(pooling=cfg["pooling"], **common)
    return aib, esb


def make_besm_config(cfg: dict) -> BesmConfig:
    b = cfg["besm"]
    return BesmConfig(R=b["R"], P=b["P"], layer=b["layer"], mode=b["mode"])


def make_sampler_config(cfg: dict) -> SamplerConfig:
    return SamplerConfig(J=cfg["sampler"]["J"], K=cfg["sampler"]["K"])


def make_random_erasing_params(cfg: dict) -> RandomErasingParams:
    r = cfg["random_erasing"]
    return RandomErasingParams(
        probability=r["probability"],
        area_range=tuple(r["area_range"]),
        aspect_range=tuple(r["aspect_range"]),
    )


def make_train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        epochs=t["epochs"],
        base_lr=t["base_lr"],
        warmup_epochs=t["warmup_epochs"],
        decay_epochs=tuple(t["decay_epochs"]),
        decay_factor=t["decay_factor"],
        weight_decay=t["weight_decay"],
        optimizer=t["optimizer"],
        margin=t["margin"],
        besm=make_besm_config(cfg),
        sampler=make_sampler_config(cfg),
        random_erasing=make_random_erasing_params(cfg),
        seed=cfg["seed"],
        checkpoint_every=t["checkpoint_every"],
    )


def desk_schedule(epochs: int) -> dict:
    """Proportional desk-scale schedule: 10% warmup, decays at 33% and 58%."""
    return {
        "epochs": epochs,
        "warmup_epochs": max(1, round(0.10 * epochs)),
        "decay_epochs": [round(0.33 * epochs), round(0.58 * epochs)],
    }


def desk_preset(data_root=None, seed: int = 0, epochs: int = 40,
                base: bool = False) -> dict:
    """Full desk-scale config: tiny backbone, 64x32 inputs, J=5 K=4 batches.

    ``base=True`` switches off erasing and uses mean pooling on both branch
    heads (the ablation baseline); otherwise the defaults (erasing on, ESB
    Lehmer pooling) stay in force.
    """
    cfg = default_config()
    cfg["seed"] = seed
    if data_root is not None:
        cfg["data"]["root"] = str(data_root)
    cfg["data"]["input_size"] = [64, 32]
    cfg["model"]["stage_channels"] = [16, 32, 64, 128]
    cfg["model"]["embedding_dim"] = 64
    cfg["sampler"]["J"] = 5
    cfg["sampler"]["K"] = 4
    cfg["train"].update(desk_schedule(epochs))
    cfg["train"]["checkpoint_every"] = 20
    if base:
        cfg["besm"]["mode"] = "off"
        cfg["pooling"] = "gap"
        cfg["model"]["aib_pooling"] = "gap"
    return cfg
