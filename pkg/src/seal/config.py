"""Flat JSON configuration.

Every key maps onto one field of one dataclass.  Fields of the core training
dataclasses keep their own names; the rest carry a short prefix so no two
keys collide::

    batch_size, lr_image, ...   TrainConfig
    latent_dim, n_flows, ...    VaeConfig
    lambda_inv, tau, ...        LossWeights
    min_overlap, n_top_hvg ...  PreprocessConfig
    aug_<field>                 AugmentConfig
    vit_<field>                 ToyVitConfig
    lora_<field>                AdapterPlan
    synth_<field>               SynthSpec
    probe_<field>               ProbeConfig
    retrieval_<field>           RetrievalConfig

Seeds are not config keys; ``--seed`` drives every seeded component.
"""
from __future__ import annotations

import json
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path
from typing import Any

from .augment import AugmentConfig
from .errors import ConfigError
from .objectives import LossWeights
from .omics_vae import VaeConfig
from .pipeline import PreprocessConfig
from .synth import SynthSpec
from .trainer import TrainConfig
from .vision_lora import AdapterPlan, ToyVitConfig


@dataclass
class ProbeConfig:
    k: int = 5
    n_components: int = 256
    alpha: float = 1.0


@dataclass
class RetrievalConfig:
    top_k: int = 50
    clamp_negative: bool = False
    pcc_threshold: float = 0.3
    percentile: float = 75.0
    min_fraction: float = 0.5


# (prefix, class); the empty prefix is shared by the core sections
SECTIONS: dict[str, tuple[str, type]] = {
    "train": ("", TrainConfig),
    "vae": ("", VaeConfig),
    "weights": ("", LossWeights),
    "preprocess": ("", PreprocessConfig),
    "augment": ("aug_", AugmentConfig),
    "vit": ("vit_", ToyVitConfig),
    "adapter": ("lora_", AdapterPlan),
    "synth": ("synth_", SynthSpec),
    "probe": ("probe_", ProbeConfig),
    "retrieval": ("retrieval_", RetrievalConfig),
}
# nested objects, seeds and data-derived widths are not flat keys
_EXCLUDED = {"weights", "augmentation", "seed", "input_dim"}


def _key_table() -> dict[str, tuple[str, str]]:
    table: dict[str, tuple[str, str]] = {}
    for section, (prefix, cls) in SECTIONS.items():
        for f in fields(cls):
            if f.name in _EXCLUDED:
                continue
            key = prefix + f.name
            if key in table:
                raise AssertionError(f"config key collision: {key}")
            table[key] = (section, f.name)
    return table


KEYS = _key_table()


def _default(cls: type, name: str) -> Any:
    f = next(f for f in fields(cls) if f.name == name)
    if f.default is not MISSING:
        return f.default
    return f.default_factory()  # type: ignore[misc]


def default_flat() -> dict[str, Any]:
    out = {}
    for key, (section, name) in KEYS.items():
        v = _default(SECTIONS[section][1], name)
        out[key] = list(v) if isinstance(v, tuple) else v
    return out


def _coerce(key: str, value: Any, default: Any) -> Any:
    """Check a JSON value against the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {key!r} expects a string, got {value!r}")
        return value
    if isinstance(default, (tuple, list)):
        if not isinstance(value, list):
            raise ConfigError(f"config key {key!r} expects a list, got {value!r}")
        if default and len(value) != len(default) and isinstance(default, tuple) and not isinstance(default[0], str):
            raise ConfigError(f"config key {key!r} expects {len(default)} values, got {len(value)}")
        return type(default)(value)
    return value


@dataclass
class RunConfig:
    """All sections resolved from defaults plus overrides."""

    train: TrainConfig = field(default_factory=TrainConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    vit: ToyVitConfig = field(default_factory=ToyVitConfig)
    adapter: AdapterPlan = field(default_factory=AdapterPlan)
    synth: SynthSpec = field(default_factory=SynthSpec)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    overrides: dict[str, Any] = field(default_factory=dict)

    def flat(self) -> dict[str, Any]:
        out = default_flat()
        out.update(self.overrides)
        return out


def build_config(overrides: dict[str, Any] | None = None, seed: int = 0) -> RunConfig:
    overrides = dict(overrides or {})
    unknown = sorted(k for k in overrides if k not in KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    for key, value in overrides.items():
        section, name = KEYS[key]
        kwargs[section][name] = _coerce(key, value, _default(SECTIONS[section][1], name))
    try:
        weights = LossWeights(**kwargs["weights"])
        augmentation = AugmentConfig(**kwargs["augment"])
        return RunConfig(
            train=TrainConfig(**kwargs["train"], weights=weights, augmentation=augmentation, seed=seed),
            vae=VaeConfig(**kwargs["vae"]),
            preprocess=PreprocessConfig(**kwargs["preprocess"]),
            vit=ToyVitConfig(**kwargs["vit"]),
            adapter=AdapterPlan(**kwargs["adapter"], seed=seed),
            synth=SynthSpec(**kwargs["synth"], seed=seed),
            probe=ProbeConfig(**kwargs["probe"]),
            retrieval=RetrievalConfig(**kwargs["retrieval"]),
            overrides=overrides,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, seed: int = 0) -> RunConfig:
    if path is None:
        return build_config({}, seed)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a JSON object")
    return build_config(data, seed)


def require_keys(data: dict, keys, where: str) -> None:
    """Fail naming every absent key of a stored config section."""
    missing = [k for k in keys if k not in data]
    if missing:
        raise ConfigError(f"{where}: missing config key(s): {', '.join(missing)}")


# Desk-scale settings for the bundled synthetic data (see README).
DESK_PRESET: dict[str, Any] = {
    "batch_size": 64,
    "lr_stage1": 1e-3,
    "lr_image": 3e-2,
    "lr_omics": 3e-2,
    "stage2_epochs": 40,
    "hidden_dims": [128],
    "latent_dim": 64,
    "vit_image_size": 32,
    "vit_width": 64,
}


def as_json(cfg: RunConfig) -> str:
    return json.dumps(cfg.flat(), indent=1, sort_keys=True) + "\n"
