"""Strict INI run-configuration files.

Sections: [data], [model], [train], [loss], [eval]. Unknown sections or keys
are fatal and reported with their line number.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path

from .losses import AnnealSchedule, LossWeights
from .nn_engine import SegNetConfig, TrainConfig
from .ood_metrics import DEFAULT_ECE_BINS, DEFAULT_SEGMENT_THRESHOLDS, METHODS
from .synthetic_data import DatasetConfig


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in re.split(r"[,x\s]+", text.strip()) if v)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in re.split(r"[,\s]+", text.strip()) if v)


def _words(text: str) -> tuple[str, ...]:
    return tuple(v for v in re.split(r"[,\s]+", text.strip()) if v)


# key -> parser, per section
SCHEMA = {
    "data": {
        "image_size": _ints,
        "num_train": int,
        "num_eval": int,
        "shape_classes": _words,
        "ood_shape": str,
        "noise_std": float,
        "min_radius": int,
        "max_radius": int,
        "shapes_per_image": _ints,
        "seed": int,
    },
    "model": {
        "hidden_channels": int,
        "depth": int,
        "kernel_size": int,
    },
    "train": {
        "batch_size": int,
        "total_iterations": int,
        "learning_rate": float,
        "weight_decay": float,
        "seed": int,
        "checkpoint_every": int,
        "lr_schedule": str,
    },
    "loss": {
        "w_wasserstein": float,
        "w_dice": float,
        "w_kl": float,
        "w_mse": float,
        "ramp_start": int,
        "ramp_end": int,
        "prior_concentration": float,
    },
    "eval": {
        "thresholds": _floats,
        "methods": _words,
        "ece_bins": int,
    },
}

DESK_RAMP = (1000, 1200)


@dataclass
class RunConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    model: SegNetConfig = field(default_factory=SegNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    thresholds: tuple[float, ...] = DEFAULT_SEGMENT_THRESHOLDS
    methods: tuple[str, ...] = ("uncertainty", "max_softmax", "entropy")
    ece_bins: int = DEFAULT_ECE_BINS
    raw: dict[str, dict[str, str]] = field(default_factory=dict)

    def echo(self) -> str:
        """Every resolved value, one ``section.key = value`` line each."""
        d, m, t = self.data, self.model, self.train
        w, a = t.loss_weights, t.anneal
        pairs = [
            ("data.image_size", list(d.image_size)),
            ("data.num_train", d.num_train),
            ("data.num_eval", d.num_eval),
            ("data.shape_classes", list(d.shape_classes)),
            ("data.ood_shape", d.ood_shape),
            ("data.noise_std", d.noise_std),
            ("data.min_radius", d.min_radius),
            ("data.max_radius", d.max_radius),
            ("data.shapes_per_image", list(d.shapes_per_image)),
            ("data.seed", d.seed),
            ("model.in_channels", m.in_channels),
            ("model.hidden_channels", m.hidden_channels),
            ("model.depth", m.depth),
            ("model.num_classes", m.num_classes),
            ("model.kernel_size", m.kernel_size),
            ("train.batch_size", t.batch_size),
            ("train.total_iterations", t.total_iterations),
            ("train.learning_rate", t.learning_rate),
            ("train.weight_decay", t.weight_decay),
            ("train.seed", t.seed),
            ("train.checkpoint_every", t.checkpoint_every),
            ("train.lr_schedule", t.lr_schedule),
            ("loss.w_wasserstein", w.w_wasserstein),
            ("loss.w_dice", w.w_dice),
            ("loss.w_kl", w.w_kl),
            ("loss.w_mse", w.w_mse),
            ("loss.ramp_start", a.ramp_start),
            ("loss.ramp_end", a.ramp_end),
            ("loss.prior_concentration", t.prior_concentration),
            ("eval.thresholds", list(self.thresholds)),
            ("eval.methods", list(self.methods)),
            ("eval.ece_bins", self.ece_bins),
        ]
        return "".join(f"{k} = {v}\n" for k, v in pairs)


def _line_of(text: str, section: str, key: str) -> int | None:
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"\[([^\]]+)\]", stripped)
        if m:
            current = m.group(1).strip()
            continue
        if current == section and re.match(rf"{re.escape(key)}\s*[=:]", stripped, re.IGNORECASE):
            return lineno
    return None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    raw: dict[str, dict[str, str]] = {}
    values: dict[str, dict] = {name: {} for name in SCHEMA}
    for section in parser.sections():
        if section not in SCHEMA:
            line = _line_of(text, section, "") or "?"
            raise ConfigError(f"{source}: unknown section [{section}] (valid: {', '.join(SCHEMA)})")
        raw[section] = {}
        for key, value in parser.items(section):
            line = _line_of(text, section, key)
            where = f"{source}:{line}" if line else source
            if key not in SCHEMA[section]:
                raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
            raw[section][key] = value
            try:
                values[section][key] = SCHEMA[section][key](value)
            except ValueError as exc:
                raise ConfigError(f"{where}: bad value for {section}.{key}: {value!r} ({exc})") from exc

    try:
        data = DatasetConfig(**values["data"])
        model = SegNetConfig(num_classes=data.num_classes, **values["model"])
        lv = values["loss"]
        defaults = LossWeights()
        weights = LossWeights(
            lv.get("w_wasserstein", defaults.w_wasserstein),
            lv.get("w_dice", defaults.w_dice),
            lv.get("w_kl", defaults.w_kl),
            lv.get("w_mse", defaults.w_mse),
        )
        # the ramp plateau is the KL weight itself
        anneal = AnnealSchedule(
            lv.get("ramp_start", DESK_RAMP[0]), lv.get("ramp_end", DESK_RAMP[1]), weights.w_kl
        )
        train = TrainConfig(
            loss_weights=weights,
            anneal=anneal,
            prior_concentration=lv.get("prior_concentration", 1.0),
            **values["train"],
        )
        ev = values["eval"]
        methods = ev.get("methods", RunConfig.methods)
        bad = [m for m in methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown eval method(s) {bad}; valid: {sorted(METHODS)}")
        return RunConfig(
            data=data,
            model=model,
            train=train,
            thresholds=ev.get("thresholds", DEFAULT_SEGMENT_THRESHOLDS),
            methods=tuple(methods),
            ece_bins=ev.get("ece_bins", DEFAULT_ECE_BINS),
            raw=raw,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
