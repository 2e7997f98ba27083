"""Experiment configuration.

All hyperparameters live in one tree of dataclasses.  The tree is the single
source for YAML (de)serialization, dotted ``key=value`` overrides, the
fingerprints stored in checkpoints, and the key listing printed by ``--help``.
"""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


@dataclass
class IENetConfig:
    n_blocks: int = 4
    widths: tuple[int, ...] = (64, 128, 256, 256)
    d_z: int = 256
    moment_hidden: int = 256
    disc_hidden: int = 256
    lam_kl: float = 1.0
    lam_rec: float = 10.0
    per_sample_kl: bool = False
    zero_init_disc: bool = True


@dataclass
class ExpertNetConfig:
    base_channels: int = 64
    n_down: int = 2
    n_res: int = 2
    d_s: int = 8
    detail_channels: int = 32
    mlp_hidden: int = 256
    w_x: float = 1.0
    w_m: float = 1.0
    w_s: float = 1.0
    stop_grad_detail: bool = False


@dataclass
class MeasurementConfig:
    layers: tuple[str, ...] = ("conv1_2", "conv2_2", "conv3_4")
    layer_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    alpha: float = 0.5
    normalization: str = "minmax"
    percentile: float = 99.0
    mode: str = "perceptual"
    backbone: str = "pretrained"
    weights_path: str = ""
    backbone_seed: int = 0
    input_mean: tuple[float, ...] = (0.485, 0.456, 0.406)
    input_std: tuple[float, ...] = (0.229, 0.224, 0.225)
    top_k_fraction: float = 0.01


@dataclass
class TrainConfig:
    batch_size: int = 4
    ie_optimizer: str = "sgd"
    ie_lr: float = 1e-3
    ie_momentum: float = 0.9
    ie_epochs: int = 200
    ie_max_steps: int = 0
    expert_optimizer: str = "adam"
    expert_lr: float = 1e-3
    expert_epochs: int = 200
    expert_max_steps: int = 0
    freeze_ie: bool = True
    clip_grad_norm: float = 0.0


@dataclass
class AblationConfig:
    use_mi_loss: bool = True
    use_expert_net: bool = True
    use_detail_guidance: bool = True
    use_naive_impression_term: bool = True


@dataclass
class ExperimentConfig:
    image_size: int = 256
    channels: int = 3
    seed: int = 0
    ie: IENetConfig = field(default_factory=IENetConfig)
    expert: ExpertNetConfig = field(default_factory=ExpertNetConfig)
    pm: MeasurementConfig = field(default_factory=MeasurementConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        validate(self)

    # ------------------------------------------------------------------
    @classmethod
    def small(cls, **kw) -> "ExperimentConfig":
        """Preset for 64x64 datasets: 3 inception blocks, 1 residual block."""
        cfg = cls(
            image_size=64,
            ie=IENetConfig(n_blocks=3, widths=(64, 128, 256), d_z=64),
            expert=ExpertNetConfig(n_res=1),
            train=TrainConfig(ie_epochs=20, expert_epochs=20),
        )
        return apply_overrides(cfg, kw) if kw else cfg

    @classmethod
    def desk(cls, **kw) -> "ExperimentConfig":
        """64x64 preset with narrow layers, sized for single-core CPU runs."""
        cfg = cls(
            image_size=64,
            ie=IENetConfig(n_blocks=3, widths=(16, 32, 64), d_z=64,
                           moment_hidden=128, disc_hidden=128),
            expert=ExpertNetConfig(base_channels=16, n_res=1, detail_channels=16,
                                   mlp_hidden=64),
            pm=MeasurementConfig(backbone="fallback"),
            train=TrainConfig(ie_optimizer="adam", ie_epochs=20, expert_epochs=20),
        )
        return apply_overrides(cfg, kw) if kw else cfg

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return apply_overrides(cls(), _flatten(data))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
        return cls.from_dict(data)

    def fingerprint(self) -> str:
        return _digest(self.to_dict())

    def model_fingerprint(self) -> str:
        """Digest of the fields that determine network shapes."""
        return _digest({"image_size": self.image_size, "channels": self.channels,
                        "ie": _to_plain(dataclasses.asdict(self.ie)),
                        "expert": _to_plain(dataclasses.asdict(self.expert))})


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _flatten(data: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def iter_keys(cfg=None, prefix: str = ""):
    """Yield ``(dotted_key, default_value, type_name)`` for every leaf."""
    cfg = ExperimentConfig() if cfg is None else cfg
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            yield from iter_keys(value, f"{prefix}{f.name}.")
        else:
            yield f"{prefix}{f.name}", value, _type_name(f.type)


def _type_name(tp) -> str:
    return tp if isinstance(tp, str) else getattr(tp, "__name__", str(tp))


def _coerce(key: str, raw: Any, current: Any):
    if isinstance(raw, str) and not isinstance(current, str):
        try:
            raw = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    if isinstance(current, bool):
        if not isinstance(raw, bool):
            raise ConfigError(f"{key}: expected bool, got {raw!r}")
        return raw
    if isinstance(current, int):
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ConfigError(f"{key}: expected int, got {raw!r}")
        return raw
    if isinstance(current, float):
        if isinstance(raw, str):
            # YAML 1.1 reads "1e-3" (no dot) as a string
            with contextlib.suppress(ValueError):
                raw = float(raw)
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigError(f"{key}: expected float, got {raw!r}")
        return float(raw)
    if isinstance(current, str):
        if not isinstance(raw, str):
            raise ConfigError(f"{key}: expected str, got {raw!r}")
        return raw
    if isinstance(current, tuple):
        if isinstance(raw, str):
            raw = [p.strip() for p in raw.split(",") if p.strip()]
            raw = [yaml.safe_load(p) if not current or not isinstance(current[0], str) else p
                   for p in raw]
        if not isinstance(raw, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {raw!r}")
        if current:
            proto = current[0]
            return tuple(_coerce(key, v, proto) for v in raw)
        return tuple(raw)
    raise ConfigError(f"{key}: unsupported type")


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Return a copy of ``cfg`` with dotted-key overrides applied.

    ``overrides`` is a mapping or an iterable of ``"a.b=value"`` strings.
    Unknown keys and ill-typed values raise :class:`ConfigError`.
    """
    if not isinstance(overrides, dict):
        pairs = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            pairs[k.strip()] = v.strip()
        overrides = pairs
    data = dataclasses.asdict(cfg)
    known = {k: v for k, v, _ in iter_keys(cfg)}
    for key, raw in overrides.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        value = _coerce(key, raw, known[key])
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    return _build(ExperimentConfig, data)


def _build(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        value = data[f.name]
        if isinstance(value, dict):
            sub = {"ie": IENetConfig, "expert": ExpertNetConfig, "pm": MeasurementConfig,
                   "train": TrainConfig, "ablation": AblationConfig}[f.name]
            value = _build(sub, value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def validate(cfg: ExperimentConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.image_size > 0, "image_size must be positive")
    need(cfg.channels in (1, 3), "channels must be 1 or 3")
    ie, ex, pm, tr = cfg.ie, cfg.expert, cfg.pm, cfg.train
    need(ie.n_blocks >= 1 and len(ie.widths) == ie.n_blocks,
         "ie.widths must list one width per inception block")
    need(all(w % 4 == 0 and w > 0 for w in ie.widths), "ie.widths must be multiples of 4")
    need(cfg.image_size % (2 ** ie.n_blocks) == 0,
         "image_size must be divisible by 2**ie.n_blocks")
    need(cfg.image_size % (2 ** ex.n_down) == 0,
         "image_size must be divisible by 2**expert.n_down")
    need(ie.d_z > 0 and ex.d_s > 0, "latent sizes must be positive")
    need(ie.lam_kl >= 0 and ie.lam_rec >= 0, "loss weights must be nonnegative")
    need(min(ex.w_x, ex.w_m, ex.w_s) >= 0, "expert loss weights must be nonnegative")
    need(len(pm.layers) == len(pm.layer_weights), "pm.layer_weights must match pm.layers")
    need(0.0 <= pm.alpha <= 1.0, "pm.alpha must lie in [0, 1]")
    need(pm.normalization in ("minmax", "percentile"), "pm.normalization: minmax|percentile")
    need(pm.mode in ("perceptual", "pixel_x_xhat", "pixel_x_m", "pixel_m_mhat"),
         "pm.mode: perceptual|pixel_x_xhat|pixel_x_m|pixel_m_mhat")
    need(pm.backbone in ("pretrained", "fallback"), "pm.backbone: pretrained|fallback")
    need(0.0 < pm.top_k_fraction <= 1.0, "pm.top_k_fraction must lie in (0, 1]")
    need(tr.batch_size >= 1, "train.batch_size must be >= 1")
    need(tr.ie_lr > 0 and tr.expert_lr > 0, "learning rates must be positive")
    need(tr.ie_optimizer in ("sgd", "adam") and tr.expert_optimizer in ("sgd", "adam"),
         "optimizers: sgd|adam")
    need(tr.ie_epochs >= 0 and tr.expert_epochs >= 0, "epochs must be nonnegative")
