"""Run configuration: INI-style key=value sections with full validation.

Every key is optional and falls back to a preset-aware default; every key can
also be overridden on the command line via ``--set section.key=value``.
Validation collects all problems before failing, each tagged with its
``section.key`` path.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

from .backbone import BackboneConfig
from .head import LossWeights
from .adaptation import Adaptive, Direct, SaturationPolicy
from .harness import SUPERVISION_MODES, TrainConfig
from .model import ModelConfig
from .synth import ScenarioParams


class ConfigError(ValueError):
    """One or more configuration values are invalid; message lists all of them."""


_PRESETS = {
    "toy": dict(num_layers=8, embed_dim=32, num_heads=2, patch_size=8,
                template_size=32, search_size=64, head_channels=32, l_star=4),
    "paper": dict(num_layers=12, embed_dim=192, num_heads=3, patch_size=16,
                  template_size=128, search_size=256, head_channels=256, l_star=6),
}


def _occlusion(text: str):
    text = text.strip()
    if not text:
        return ()
    out = []
    for part in text.split(","):
        a, b = part.split(":")
        out.append((int(a), int(b)))
    return tuple(out)


# section -> key -> (default or None for preset-dependent, parser)
_SCHEMA = {
    "model": {
        "preset": ("toy", str),
        "num_layers": (None, int),
        "embed_dim": (None, int),
        "num_heads": (None, int),
        "patch_size": (None, int),
        "template_size": (None, int),
        "search_size": (None, int),
        "mlp_ratio": (4.0, float),
        "head_channels": (None, int),
        "l_star": (None, int),
        "selector_hidden": (160, int),
        "selector_input": ("channel0", str),
    },
    "adaptation": {
        "policy": ("direct", str),
        "l_star": (None, int),  # defaults to model.l_star
        "mu": (0.92, float),
    },
    "loss": {
        "lambda_iou": (2.0, float),
        "lambda_l1": (5.0, float),
        "gamma": (0.2, float),
    },
    "train": {
        "mode": ("maximizing", str),
        "steps": (2000, int),
        "seed": (0, int),
        "lr_head": (1e-3, float),
        "lr_backbone": (1e-4, float),
        "weight_decay": (1e-4, float),
        "center_jitter": (2.0, float),
        "scale_jitter": (0.25, float),
        "routing": ("target", str),
        "sequences": (20, int),
        "frames_per_sequence": (40, int),
    },
    "data": {
        "frame_size": (128, int),
        "target_size": (24.0, float),
        "size_jitter": (0.2, float),
        "speed": (2.0, float),
        "scale_drift": (0.0, float),
        "distractors": (2, int),
        "occlusion": ((), _occlusion),
        "background_noise": (0.04, float),
    },
    "eval": {
        "sequences": (10, int),
        "frames_per_sequence": (60, int),
        "seed": (1000, int),
        "bench_frames": (500, int),
        "bench_warmup": (20, int),
    },
    "output": {
        "dir": ("runs/default", str),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)  # (section, key) -> parsed value

    def get(self, section: str, key: str):
        return self.values[(section, key)]

    # ---- resolved objects -------------------------------------------------

    def model_config(self) -> ModelConfig:
        preset = self.get("model", "preset")
        base = dict(_PRESETS[preset])
        for k in base:
            v = self.get("model", k)
            if v is not None:
                base[k] = v
        bb = BackboneConfig(
            num_layers=base["num_layers"],
            embed_dim=base["embed_dim"],
            num_heads=base["num_heads"],
            patch_size=base["patch_size"],
            template_size=(base["template_size"], base["template_size"]),
            search_size=(base["search_size"], base["search_size"]),
            mlp_ratio=self.get("model", "mlp_ratio"),
        )
        return ModelConfig(
            backbone=bb,
            l_star=base["l_star"],
            head_channels=base["head_channels"],
            selector_hidden=self.get("model", "selector_hidden"),
            selector_input=self.get("model", "selector_input"),
            use_selector=self.get("train", "mode") != "fixed_layer",
        )

    def policy(self) -> SaturationPolicy:
        if self.get("adaptation", "policy") == "adaptive":
            return Adaptive(mu=self.get("adaptation", "mu"))
        l_star = self.get("adaptation", "l_star")
        if l_star is None:
            l_star = self.model_config().l_star
        return Direct(l_star=l_star)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_iou=self.get("loss", "lambda_iou"),
            lambda_l1=self.get("loss", "lambda_l1"),
            gamma=self.get("loss", "gamma"),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.get("train", "steps"),
            seed=self.get("train", "seed"),
            mode=self.get("train", "mode"),
            lr_head=self.get("train", "lr_head"),
            lr_backbone=self.get("train", "lr_backbone"),
            weight_decay=self.get("train", "weight_decay"),
            center_jitter=self.get("train", "center_jitter"),
            scale_jitter=self.get("train", "scale_jitter"),
            routing=self.get("train", "routing"),
            weights=self.loss_weights(),
        )

    def scenario(self) -> ScenarioParams:
        return ScenarioParams(
            frame_size=self.get("data", "frame_size"),
            target_size=self.get("data", "target_size"),
            size_jitter=self.get("data", "size_jitter"),
            speed=self.get("data", "speed"),
            scale_drift=self.get("data", "scale_drift"),
            distractor_count=self.get("data", "distractors"),
            occlusion_intervals=self.get("data", "occlusion"),
            background_noise=self.get("data", "background_noise"),
        )


def _parse_raw(raw: dict[tuple[str, str], str]) -> RunConfig:
    """Convert raw strings through the schema, collecting every error."""
    errors = []
    values: dict[tuple[str, str], object] = {}
    for section, keys in _SCHEMA.items():
        for key, (default, parser) in keys.items():
            if (section, key) in raw:
                text = raw[(section, key)]
                try:
                    values[(section, key)] = parser(text)
                except (ValueError, TypeError):
                    errors.append(f"{section}.{key}: cannot parse {text!r}")
                    values[(section, key)] = default
            else:
                values[(section, key)] = default
    for section, key in raw:
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            errors.append(f"{section}.{key}: unknown configuration key")
    cfg = RunConfig(values=values)
    errors.extend(_validate(cfg))
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def _validate(cfg: RunConfig) -> list[str]:
    errs = []
    g = cfg.get
    if g("model", "preset") not in _PRESETS:
        errs.append(f"model.preset: must be one of {sorted(_PRESETS)}")
        return errs  # later checks need a valid preset
    if g("model", "selector_input") not in ("channel0", "token0"):
        errs.append("model.selector_input: must be 'channel0' or 'token0'")
    if g("train", "mode") not in SUPERVISION_MODES:
        errs.append(f"train.mode: must be one of {SUPERVISION_MODES}")
    if g("train", "routing") not in ("target", "module"):
        errs.append("train.routing: must be 'target' or 'module'")
    if g("adaptation", "policy") not in ("direct", "adaptive"):
        errs.append("adaptation.policy: must be 'direct' or 'adaptive'")
    if not 0.0 < g("adaptation", "mu") < 1.0:
        errs.append("adaptation.mu: must lie strictly in (0, 1)")

    try:
        mc = cfg.model_config()
    except (ValueError, KeyError) as exc:
        errs.append(f"model.*: {exc}")
        mc = None
    if mc is not None:
        pol_l = g("adaptation", "l_star")
        if pol_l is not None and not 1 <= pol_l < mc.backbone.num_layers:
            errs.append(f"adaptation.l_star: must lie in 1..{mc.backbone.num_layers - 1}")

    for sec, key in (("loss", "lambda_iou"), ("loss", "lambda_l1"), ("loss", "gamma")):
        if g(sec, key) < 0:
            errs.append(f"{sec}.{key}: must be nonnegative")
    for sec, key, lo in (
        ("train", "steps", 1),
        ("train", "sequences", 1),
        ("train", "frames_per_sequence", 2),
        ("eval", "sequences", 1),
        ("eval", "frames_per_sequence", 2),
        ("eval", "bench_frames", 100),
        ("eval", "bench_warmup", 0),
    ):
        if g(sec, key) < lo:
            errs.append(f"{sec}.{key}: must be >= {lo}")
    for sec, key in (("train", "lr_head"), ("train", "lr_backbone")):
        if g(sec, key) <= 0:
            errs.append(f"{sec}.{key}: must be positive")
    if g("train", "weight_decay") < 0:
        errs.append("train.weight_decay: must be nonnegative")
    scen_errs = cfg.scenario().validate()
    errs.extend(f"data.*: {e}" for e in scen_errs)
    return errs


def load_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    """Read an INI config file (optional) and apply --set overrides."""
    raw: dict[tuple[str, str], str] = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.read(path)
        for section in parser.sections():
            for key, value in parser.items(section):
                raw[(section, key)] = value
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        raw[(section.strip(), key.strip())] = value.strip()
    return _parse_raw(raw)
