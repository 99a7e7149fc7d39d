"""Flat ``section.key = value`` run configuration.

One namespace covers the whole run (backbone, strategy, head, optimizer,
data).  Files hold one assignment per line with ``#`` comments; ``--set
key=value`` overrides win over the file, which wins over the defaults below.
Unknown keys are rejected rather than ignored so typos fail loudly.  The
canonical echo (sorted ``key = value`` lines) is what gets hashed into
checkpoints.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .backbone import BackboneConfig
from .data import FAMILIES, AUGMENTS, DatasetSpec
from .errors import ConfigError
from .petl import PETLConfig
from .trainer import HeadConfig, TrainConfig

# key -> (kind, default);  kind in {"int", "float", "str", "bool"}
SCHEMA = {
    "run.seed": ("int", 0),
    "backbone.depth": ("int", 6),
    "backbone.dim": ("int", 96),
    "backbone.heads": ("int", 4),
    "backbone.ffn_ratio": ("int", 4),
    "backbone.patches": ("int", 32),
    "backbone.patch_size": ("int", 32),
    "petl.strategy": ("str", "dapt"),
    "petl.rank": ("int", 16),
    "petl.scale_mode": ("str", "dynamic"),
    "petl.fixed_scale": ("float", 0.5),
    "petl.scalar_init": ("float", 0.5),
    "petl.inserted_layers": ("str", "all"),
    "petl.prompt_mode": ("str", "auto"),
    "petl.prompt_count": ("int", 4),
    "petl.prompt_pool": ("str", "mean"),
    "petl.prompt_topk": ("int", 4),
    "petl.prompt_accumulate": ("bool", True),
    "petl.tfts_granularity": ("str", "ln_linear"),
    "head.hidden": ("int", 0),
    "head.inputs": ("str", "auto"),
    "train.epochs": ("int", 60),
    "train.warmup_epochs": ("int", 5),
    "train.batch_size": ("int", 32),
    "train.lr": ("float", 5e-4),
    "train.min_lr": ("float", 1e-6),
    "train.weight_decay": ("float", 0.05),
    "train.beta1": ("float", 0.9),
    "train.beta2": ("float", 0.999),
    "train.eps": ("float", 1e-8),
    "train.label_smoothing": ("float", 0.0),
    "train.augment": ("str", "scale-translate"),
    "train.eval_every": ("int", 10),
    "data.points": ("int", 512),
    "data.noise_sigma": ("float", 0.0),
    "data.occlusion": ("float", 0.0),
    "data.clutter": ("float", 0.0),
    "data.rotation": ("str", "z"),
    "data.seed": ("int", 0),
    "data.train_size": ("int", 320),
    "data.val_size": ("int", 160),
    "data.classes": ("int", 8),
}

_TRUE = ("true", "1", "yes", "on")
_FALSE = ("false", "0", "no", "off")


def parse_value(key: str, text: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    kind, _ = SCHEMA[key]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None


def read_config_file(path) -> dict:
    """Raw key -> text from one file; duplicate keys are an error."""
    raw = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, text = stripped.split("=", 1)
        key = key.strip()
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        raw[key] = text.strip()
    return raw


def build_config(path=None, sets=()) -> dict:
    """Defaults <- file <- --set overrides, fully typed."""
    cfg = {k: v for k, (_, v) in SCHEMA.items()}
    if path is not None:
        for key, text in read_config_file(path).items():
            cfg[key] = parse_value(key, text)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        cfg[key.strip()] = parse_value(key.strip(), text)
    _cross_validate(cfg)
    return cfg


def _cross_validate(cfg: dict) -> None:
    if cfg["train.augment"] not in AUGMENTS:
        raise ConfigError(f"train.augment must be one of {AUGMENTS}")
    if not 2 <= cfg["data.classes"] <= len(FAMILIES):
        raise ConfigError(f"data.classes must lie in [2, {len(FAMILIES)}]")
    if cfg["data.points"] < cfg["backbone.patches"]:
        raise ConfigError("data.points must be >= backbone.patches")
    if cfg["data.points"] < cfg["backbone.patch_size"]:
        raise ConfigError("data.points must be >= backbone.patch_size")


def config_echo(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = format(v, ".17g")
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict) -> bytes:
    return hashlib.sha256(config_echo(cfg).encode("utf-8")).digest()


# --------------------------------------------------- typed sub-configs

def to_backbone(cfg: dict) -> BackboneConfig:
    return BackboneConfig(
        depth=cfg["backbone.depth"], dim=cfg["backbone.dim"], heads=cfg["backbone.heads"],
        ffn_ratio=cfg["backbone.ffn_ratio"], patches=cfg["backbone.patches"],
        patch_size=cfg["backbone.patch_size"])


def to_petl(cfg: dict) -> PETLConfig:
    return PETLConfig(
        strategy=cfg["petl.strategy"], rank=cfg["petl.rank"],
        scale_mode=cfg["petl.scale_mode"], fixed_scale=cfg["petl.fixed_scale"],
        scalar_init=cfg["petl.scalar_init"], inserted_layers=cfg["petl.inserted_layers"],
        prompt_mode=cfg["petl.prompt_mode"], prompt_count=cfg["petl.prompt_count"],
        prompt_pool=cfg["petl.prompt_pool"], prompt_topk=cfg["petl.prompt_topk"],
        prompt_accumulate=cfg["petl.prompt_accumulate"],
        tfts_granularity=cfg["petl.tfts_granularity"])


def to_head(cfg: dict) -> HeadConfig:
    return HeadConfig(hidden=cfg["head.hidden"], inputs=cfg["head.inputs"])


def to_train(cfg: dict) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["train.epochs"], warmup_epochs=cfg["train.warmup_epochs"],
        batch_size=cfg["train.batch_size"], lr=cfg["train.lr"], min_lr=cfg["train.min_lr"],
        weight_decay=cfg["train.weight_decay"], beta1=cfg["train.beta1"],
        beta2=cfg["train.beta2"], eps=cfg["train.eps"],
        label_smoothing=cfg["train.label_smoothing"], augment=cfg["train.augment"],
        eval_every=cfg["train.eval_every"], seed=cfg["run.seed"])


def to_dataset_specs(cfg: dict):
    """(train, val) splits: same distribution, disjoint sample streams."""
    common = dict(
        points=cfg["data.points"], noise_sigma=cfg["data.noise_sigma"],
        occlusion=cfg["data.occlusion"], clutter=cfg["data.clutter"],
        rotation=cfg["data.rotation"], seed=cfg["data.seed"],
        families=FAMILIES[: cfg["data.classes"]])
    train = DatasetSpec(size=cfg["data.train_size"], index_offset=0, **common)
    val = DatasetSpec(size=cfg["data.val_size"], index_offset=cfg["data.train_size"], **common)
    return train, val
