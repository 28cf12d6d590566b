"""Flat ``section.key = value`` run configuration.

Precedence is command-line overrides, then the config file, then the
defaults below. Every problem found while parsing is collected and raised
together in a single :class:`~path24.errors.ConfigError`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .dataset import COLOR_MODES, IMAGENET_MEAN, IMAGENET_STD, PreprocessConfig
from .errors import ConfigError
from .model import BackboneSpec, HeadConfig
from .training import TrainConfig

ENV_DATA_ROOT = "PATH24_DATA_ROOT"


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_str(text):
    text = text.strip()
    return None if text.lower() in ("", "none") else text


def _floats(n):
    def parse(text):
        values = tuple(float(v) for v in text.replace(",", " ").split())
        if len(values) != n:
            raise ValueError(f"expected {n} numbers, got {len(values)}")
        return values
    return parse


def _choice(*options):
    def parse(text):
        text = text.strip()
        if text not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return text
    return parse


def _optional_int(text):
    text = text.strip()
    return None if text.lower() in ("", "none") else int(text)


def _optional_float(text):
    text = text.strip()
    return None if text.lower() in ("", "none") else float(text)


# key -> (parser, default)
SCHEMA = {
    "dataset_root": (_optional_str, None),
    "manifest_path": (_optional_str, None),
    "color_mode": (_choice(*COLOR_MODES), "rgb"),
    "backbone": (str.strip, "resnet50"),
    "pretrained": (_bool, True),
    "weights_path": (_optional_str, None),
    "output_dir": (str.strip, "runs"),
    "split.val_fraction": (float, 0.2),
    "split.seed": (_optional_int, None),
    "head.hidden_width": (int, 512),
    "head.dropout_rates": (_floats(2), (0.25, 0.50)),
    "head.bn_momentum": (float, 0.1),
    "head.bn_epsilon": (float, 1e-5),
    "head.num_classes": (int, 24),
    "head.activation": (_choice("relu", "none"), "relu"),
    "train.learning_rate": (float, 1e-3),
    "train.epochs": (int, 50),
    "train.batch_size": (int, 32),
    "train.optimizer": (_choice("rmsprop", "sgd_momentum"), "rmsprop"),
    "train.seed": (int, 0),
    "train.device": (_choice("cpu", "accelerator"), "cpu"),
    "train.num_workers": (int, 0),
    "optimizer.alpha": (_optional_float, None),
    "optimizer.eps": (_optional_float, None),
    "optimizer.momentum": (_optional_float, None),
    "preprocess.target_size": (int, 224),
    "preprocess.channel_mean": (_floats(3), IMAGENET_MEAN),
    "preprocess.channel_std": (_floats(3), IMAGENET_STD),
}


def parse_lines(lines, source: str = "<config>"):
    """Parse ``key = value`` lines; returns ``(raw values, problems)``."""
    raw, problems = {}, []
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        raw[key] = value
    return raw, problems


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def preprocess(self) -> PreprocessConfig:
        v = self.values
        return PreprocessConfig(v["color_mode"], v["preprocess.target_size"],
                                v["preprocess.channel_mean"], v["preprocess.channel_std"])

    @property
    def head(self) -> HeadConfig:
        v = self.values
        return HeadConfig(v["head.hidden_width"], v["head.dropout_rates"], v["head.bn_momentum"],
                          v["head.bn_epsilon"], v["head.num_classes"], v["head.activation"])

    @property
    def backbone(self) -> BackboneSpec:
        v = self.values
        return BackboneSpec(v["backbone"], v["pretrained"], v["weights_path"])

    @property
    def train(self) -> TrainConfig:
        v = self.values
        opt = {k.split(".", 1)[1]: val for k, val in v.items()
               if k.startswith("optimizer.") and val is not None}
        return TrainConfig(v["train.learning_rate"], v["train.epochs"], v["train.batch_size"],
                           v["train.optimizer"], opt, v["train.seed"], v["train.device"],
                           v["train.num_workers"])

    @property
    def split_seed(self) -> int:
        seed = self.values["split.seed"]
        return self.values["train.seed"] if seed is None else seed

    def dumps(self) -> str:
        """Serialize every resolved key so the run can be replayed."""
        lines = []
        for key in SCHEMA:
            value = self.values[key]
            if isinstance(value, tuple):
                value = ", ".join(repr(float(x)) for x in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            elif value is None:
                value = "none"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def load_config(path: Optional[os.PathLike] = None, overrides: Optional[dict] = None) -> RunConfig:
    raw, problems = {}, []
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"config file {path} not found"])
        raw, problems = parse_lines(path.read_text(encoding="utf-8").splitlines(), str(path))
    raw.update(overrides or {})

    values = {}
    for key, value in raw.items():
        if key not in SCHEMA:
            problems.append(f"unknown key {key!r}")
            continue
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(value) if isinstance(value, str) else value
        except ValueError as exc:
            problems.append(f"{key}: invalid value {value!r} ({exc})")
    for key, (_, default) in SCHEMA.items():
        values.setdefault(key, default)
    if values["dataset_root"] is None and values["manifest_path"] is None:
        values["dataset_root"] = os.environ.get(ENV_DATA_ROOT)

    cfg = RunConfig(values)
    # constructing each section surfaces range errors from the dataclasses
    for section in ("preprocess", "head", "train", "backbone"):
        try:
            getattr(cfg, section)
        except (ValueError, KeyError) as exc:
            problems.append(f"{section}: {exc}")
    if problems:
        raise ConfigError(problems)
    return cfg
