"""Run configuration: strict JSON in, fully resolved JSON out.

A run file holds data_dir, out_dir, seed, variant, and optionally epochs,
batch_size, base_lr, a model section (network fields) and an aug section
(augmentation fields). Unknown keys anywhere are rejected so a typo cannot
silently fall back to a default. Loading materializes every default; the
resolved document round-trips through load_run_config unchanged.

The variant is the single selector for the attention wiring and for whether
CutMix runs:

    baseline  no attention blocks, no CutMix
    cam       channel attention only
    pam       pyramid attention only
    joint     both, fused by the refine conv
    cutmix    no attention blocks, CutMix on
    full      joint attention plus CutMix

A model.attention key is accepted only when it matches what the variant
implies, which keeps resolved files loadable while ruling out conflicting
requests. When model.embed_dim is omitted it defaults to 4 * base_channels,
the only value the network accepts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .augment import AugConfig
from .errors import ConfigError
from .network import NetworkConfig

VARIANTS = ("baseline", "cam", "pam", "joint", "cutmix", "full")

# variant -> (attention kind, cutmix enabled)
VARIANT_EFFECTS = {
    "baseline": ("none", False),
    "cam": ("cam", False),
    "pam": ("pam", False),
    "joint": ("joint", False),
    "cutmix": ("none", True),
    "full": ("joint", True),
}


@dataclass
class RunConfig:
    data_dir: str
    out_dir: str
    seed: int
    variant: str
    epochs: int = 30
    batch_size: int = 8
    base_lr: float = 0.01
    model: NetworkConfig = field(default_factory=NetworkConfig)
    aug: AugConfig = field(default_factory=AugConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        want = self.attention
        if self.model.attention != want:
            raise ConfigError(
                f"model.attention {self.model.attention!r} conflicts with "
                f"variant {self.variant!r} (implies {want!r})")

    @property
    def attention(self) -> str:
        return VARIANT_EFFECTS[self.variant][0]

    @property
    def cutmix_enabled(self) -> bool:
        return VARIANT_EFFECTS[self.variant][1]

    def effective_aug(self) -> AugConfig:
        """Augmentation policy as trained: cutmix gated by the variant."""
        if self.cutmix_enabled:
            return self.aug
        return replace(self.aug, cutmix_fraction=0.0)


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"{where} is missing required key {key!r}")
    return doc[key]


def _as_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    return value


def _as_number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number, got {value!r}")
    return float(value)


def _as_str(value, where: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{where} must be a string, got {value!r}")
    return value


def _check_keys(doc: dict, allowed, where: str) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"{where} has unknown keys {unknown}; "
                          f"allowed: {sorted(allowed)}")


def _section(doc: dict, key: str) -> dict:
    sub = doc.get(key, {})
    if not isinstance(sub, dict):
        raise ConfigError(f"{key!r} section must be an object, got {sub!r}")
    return sub


_MODEL_INTS = ("in_channels", "num_classes", "base_channels", "input_size",
               "embed_dim", "heads", "mlp_ratio", "layers")


def _model_from(doc: dict, attention: str) -> NetworkConfig:
    allowed = tuple(f.name for f in fields(NetworkConfig))
    _check_keys(doc, allowed, "model section")
    kwargs = {}
    for key in _MODEL_INTS:
        if key in doc:
            kwargs[key] = _as_int(doc[key], f"model.{key}")
    if "scales" in doc:
        raw = doc["scales"]
        if not isinstance(raw, list) or not raw:
            raise ConfigError(f"model.scales must be a non-empty list, got {raw!r}")
        kwargs["scales"] = tuple(_as_number(s, "model.scales entry") for s in raw)
    if "attention" in doc and _as_str(doc["attention"], "model.attention") != attention:
        raise ConfigError(
            f"model.attention {doc['attention']!r} conflicts with the variant "
            f"(implies {attention!r}); drop the key or match it")
    kwargs["attention"] = attention
    if "embed_dim" not in kwargs:
        kwargs["embed_dim"] = 4 * kwargs.get("base_channels",
                                             NetworkConfig.base_channels)
    return NetworkConfig(**kwargs)


def _aug_from(doc: dict) -> AugConfig:
    allowed = tuple(f.name for f in fields(AugConfig))
    _check_keys(doc, allowed, "aug section")
    kwargs = {}
    for key in ("cutmix_fraction", "area_min", "area_max"):
        if key in doc:
            kwargs[key] = _as_number(doc[key], f"aug.{key}")
    if "rng_seed" in doc:
        kwargs["rng_seed"] = _as_int(doc["rng_seed"], "aug.rng_seed")
    return AugConfig(**kwargs)


_TOP_KEYS = ("data_dir", "out_dir", "seed", "variant", "epochs", "batch_size",
             "base_lr", "model", "aug")


def parse_run_config(doc) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"run config must be a JSON object, got {type(doc).__name__}")
    _check_keys(doc, _TOP_KEYS, "run config")
    variant = _as_str(_require(doc, "variant", "run config"), "variant")
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    return RunConfig(
        data_dir=_as_str(_require(doc, "data_dir", "run config"), "data_dir"),
        out_dir=_as_str(_require(doc, "out_dir", "run config"), "out_dir"),
        seed=_as_int(_require(doc, "seed", "run config"), "seed"),
        variant=variant,
        epochs=_as_int(doc.get("epochs", 30), "epochs"),
        batch_size=_as_int(doc.get("batch_size", 8), "batch_size"),
        base_lr=_as_number(doc.get("base_lr", 0.01), "base_lr"),
        model=_model_from(_section(doc, "model"), VARIANT_EFFECTS[variant][0]),
        aug=_aug_from(_section(doc, "aug")),
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    return parse_run_config(doc)


def resolved_dict(cfg: RunConfig) -> dict:
    m = cfg.model
    return {
        "data_dir": cfg.data_dir,
        "out_dir": cfg.out_dir,
        "seed": cfg.seed,
        "variant": cfg.variant,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "base_lr": cfg.base_lr,
        "model": {
            "in_channels": m.in_channels,
            "num_classes": m.num_classes,
            "base_channels": m.base_channels,
            "input_size": m.input_size,
            "embed_dim": m.embed_dim,
            "heads": m.heads,
            "mlp_ratio": m.mlp_ratio,
            "layers": m.layers,
            "scales": list(m.scales),
            "attention": m.attention,
        },
        "aug": {
            "cutmix_fraction": cfg.aug.cutmix_fraction,
            "area_min": cfg.aug.area_min,
            "area_max": cfg.aug.area_max,
            "rng_seed": cfg.aug.rng_seed,
        },
    }


def save_resolved(cfg: RunConfig, path=None) -> Path:
    """Echo the fully materialized config; defaults to out_dir/config.resolved.json."""
    if path is None:
        path = Path(cfg.out_dir) / "config.resolved.json"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(resolved_dict(cfg), indent=2) + "\n")
    return path
