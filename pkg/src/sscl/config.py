"""Run configuration: a strict YAML schema covering dataset generation, the
model, every training stage, and the ablation grid.

Parsing is strict — an unknown key is an error naming the key, because a
silently ignored hyperparameter typo is the main reproducibility hazard.
``--set section.key=value`` overrides are applied after the file; the fully
resolved config is serialized next to every run's outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .models import NetworkSpec
from .pipeline import StageConfig, default_stage_config
from .synthgen import SceneConfig, benchmark_channel_meta, default_channel_meta

STAGES = ("unifeat", "core", "finetune", "probe", "simsiam")

CHANNEL_PRESETS = {
    "default": default_channel_meta,
    "benchmark8": benchmark_channel_meta,
}


class ConfigError(ValueError):
    """A config violation; .key names the offending key path."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class DatasetConfig:
    path: str | None = None
    channels: str = "benchmark8"
    H: int = 64
    W: int = 64
    num_classes: int = 8
    n_train: int = 200
    n_test: int = 100
    n_pretrain: int = 0
    region_count: int = 8
    speckle_looks: int = 1
    optical_noise_std: float = 0.15
    class_sigma: float = 0.08
    noise_enabled: bool = True
    seed: int = 0

    def scene_config(self) -> SceneConfig:
        if self.channels not in CHANNEL_PRESETS:
            raise ConfigError("dataset.channels",
                              f"unknown preset {self.channels!r}, "
                              f"expected one of {sorted(CHANNEL_PRESETS)}")
        return SceneConfig(
            H=self.H, W=self.W, num_classes=self.num_classes,
            channel_meta=CHANNEL_PRESETS[self.channels](),
            region_count=self.region_count, speckle_looks=self.speckle_looks,
            optical_noise_std=self.optical_noise_std,
            class_sigma=self.class_sigma, noise_enabled=self.noise_enabled,
            seed=self.seed,
        )


@dataclass(frozen=True)
class ModelConfig:
    fe_width: int = 16
    fe_blocks: int = 2
    proj_dims: tuple[int, ...] = (32, 32)
    backbone_widths: tuple[int, ...] = (32, 64)

    def network_spec(self, num_channels: int, num_classes: int) -> NetworkSpec:
        return NetworkSpec(num_channels=num_channels, num_classes=num_classes,
                           fe_width=self.fe_width, fe_blocks=self.fe_blocks,
                           proj_dims=tuple(self.proj_dims),
                           backbone_widths=tuple(self.backbone_widths))


@dataclass(frozen=True)
class AblateConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = ("random", "core_only", "sscl")
    p_drop_sweep: tuple[float, ...] = ()
    protocols: tuple[str, ...] = ("probe", "finetune")


@dataclass(frozen=True)
class RunConfig:
    scale: str = "desk"
    seed: int = 0
    out: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: dict[str, StageConfig] = field(default_factory=dict)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def stage(self, name: str) -> StageConfig:
        return self.stages[name]

    def to_json(self) -> dict:
        return {
            "scale": self.scale,
            "seed": self.seed,
            "out": self.out,
            "dataset": dataclasses.asdict(self.dataset),
            "model": {
                "fe_width": self.model.fe_width,
                "fe_blocks": self.model.fe_blocks,
                "proj_dims": list(self.model.proj_dims),
                "backbone_widths": list(self.model.backbone_widths),
            },
            "ablate": {
                "seeds": list(self.ablate.seeds),
                "variants": list(self.ablate.variants),
                "p_drop_sweep": list(self.ablate.p_drop_sweep),
                "protocols": list(self.ablate.protocols),
            },
            **{name: cfg.to_json() for name, cfg in self.stages.items()},
        }


def _coerce(key: str, value, target_type):
    try:
        if target_type is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if target_type is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError
            return value
        if target_type is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError
            return float(value)
        if target_type is str:
            if not isinstance(value, str):
                raise TypeError
            return value
        if target_type is tuple:
            if not isinstance(value, (list, tuple)):
                raise TypeError
            return tuple(value)
        return value
    except TypeError:
        raise ConfigError(key, f"expected {target_type.__name__}, "
                               f"got {type(value).__name__} ({value!r})") from None


_TYPE_MAP = {
    "path": (str, type(None)),
}


def _apply_section(key_prefix: str, cls, defaults: dict, section: dict) -> dict:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = dict(defaults)
    for k, v in section.items():
        if k not in fields:
            raise ConfigError(f"{key_prefix}.{k}", "unknown key")
        hint = fields[k].type
        base = {"int": int, "float": float, "str": str, "bool": bool}.get(
            str(hint).split("|")[0].strip(), None)
        if str(hint).startswith("tuple"):
            base = tuple
        if v is None and "None" in str(hint):
            out[k] = None
        elif base is not None:
            out[k] = _coerce(f"{key_prefix}.{k}", v, base)
        else:
            out[k] = v
    return out


def _stage_defaults(name: str, scale: str) -> dict:
    cfg = default_stage_config(name, scale)
    d = dataclasses.asdict(cfg)
    d["cutout_range"] = tuple(d["cutout_range"])
    d["sigma_range"] = tuple(d["sigma_range"])
    return d


def resolve_config(data: dict | None, overrides: list[str] = ()) -> RunConfig:
    """Build a RunConfig from a parsed mapping plus key=value overrides.
    Unknown keys, wrong types and invariant violations raise ConfigError."""
    data = dict(data or {})
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(ov, "override must look like section.key=value")
        key, _, raw = ov.partition("=")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            raise ConfigError(key, f"unparsable value {raw!r}") from None
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "override path crosses a scalar")
        node[parts[-1]] = value

    known_top = {"scale", "seed", "out", "dataset", "model", "ablate", *STAGES}
    for k in data:
        if k not in known_top:
            raise ConfigError(k, "unknown key")

    scale = data.get("scale", "desk")
    if scale not in ("desk", "paper"):
        raise ConfigError("scale", f"expected 'desk' or 'paper', got {scale!r}")
    seed = _coerce("seed", data.get("seed", 0), int)
    out = _coerce("out", data.get("out", "runs"), str)

    def section(name):
        s = data.get(name, {})
        if s is None:
            s = {}
        if not isinstance(s, dict):
            raise ConfigError(name, "expected a mapping")
        return s

    try:
        ds = DatasetConfig(**_apply_section(
            "dataset", DatasetConfig, dataclasses.asdict(DatasetConfig()),
            section("dataset")))
        model = ModelConfig(**_apply_section(
            "model", ModelConfig,
            {f.name: getattr(ModelConfig(), f.name) for f in dataclasses.fields(ModelConfig)},
            section("model")))
        ab = AblateConfig(**_apply_section(
            "ablate", AblateConfig,
            {f.name: getattr(AblateConfig(), f.name) for f in dataclasses.fields(AblateConfig)},
            section("ablate")))
        ab = AblateConfig(seeds=tuple(ab.seeds), variants=tuple(ab.variants),
                          p_drop_sweep=tuple(ab.p_drop_sweep),
                          protocols=tuple(ab.protocols))
        stages = {}
        for name in STAGES:
            kw = _apply_section(name, StageConfig, _stage_defaults(name, scale),
                                section(name))
            try:
                stages[name] = StageConfig(**kw)
            except ValueError as e:
                raise ConfigError(name, str(e)) from None
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError("config", str(e)) from None
    return RunConfig(scale=scale, seed=seed, out=out, dataset=ds, model=model,
                     stages=stages, ablate=ab)


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    data = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(str(path), f"config does not parse: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(str(path), "top level must be a mapping")
    return resolve_config(data, overrides)


def dump_config(cfg: RunConfig, path: Path) -> None:
    path.write_text(yaml.safe_dump(cfg.to_json(), sort_keys=True))
