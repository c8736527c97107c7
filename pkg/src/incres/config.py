"""Flat JSON experiment configuration.

Keys are dotted, grouped by prefix; anything not listed in ``SCHEMA`` is a
hard error, so a typo never silently falls back to a default::

    {"model.width": 0.125, "train.learning_rate": 0.001, "sweep.batch_sizes": [8, 16]}
"""

import json
from dataclasses import dataclass, field

from .arch import ModelConfig, desk_config
from .errors import ConfigError
from .train import TrainConfig

MODEL_KEYS = ("input_size", "input_channels", "num_classes", "width", "block_counts",
              "residual_scale", "dropout_rate", "seed")
TRAIN_KEYS = ("learning_rate", "batch_size", "trainable_layers", "epochs", "optimizer", "seed",
              "dropout_rate", "record_wall_time")
# keys beyond the two dataclasses, with defaults
EXTRA_DEFAULTS = {
    "train.k": 5,
    "train.runs": 10,
    "train.workers": 1,
    "train.base_checkpoint": None,
    "data.val_fraction": 0.2,
    "data.split": "test",
    "data.synthetic_n": 2000,
    "data.synthetic_size": 32,
    "data.synthetic_task": "opacity",
    "sweep.learning_rates": [1e-3, 1e-4, 1e-5],
    "sweep.batch_sizes": [8, 16, 32, 64],
    "sweep.trainable_layers": [None],
    "sweep.workers": 1,
}
SCHEMA = tuple([f"model.{k}" for k in MODEL_KEYS] + [f"train.{k}" for k in TRAIN_KEYS]
               + list(EXTRA_DEFAULTS))


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    extra: dict = field(default_factory=lambda: dict(EXTRA_DEFAULTS))

    def get(self, key):
        return self.extra[key]

    def to_flat(self):
        flat = {f"model.{k}": v for k, v in self.model.to_dict().items()}
        flat["model.block_counts"] = list(self.model.block_counts)
        flat.update({f"train.{k}": v for k, v in self.train.to_dict().items()})
        flat.update(self.extra)
        return dict(sorted(flat.items()))

    def dumps(self):
        return json.dumps(self.to_flat(), indent=2, sort_keys=True) + "\n"


def from_flat(flat, desk=False):
    """Build a validated config from a flat dict layered over the defaults."""
    unknown = sorted(set(flat) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}", key=unknown[0])
    base_model = desk_config() if desk else ModelConfig()
    model_kw = base_model.to_dict()
    train_kw = TrainConfig().to_dict()
    extra = dict(EXTRA_DEFAULTS)
    for key, value in flat.items():
        group, name = key.split(".", 1)
        if group == "model":
            model_kw[name] = value
        elif group == "train" and name in TRAIN_KEYS:
            train_kw[name] = value
        else:
            extra[key] = value
    try:
        model = ModelConfig(**model_kw)
        train = TrainConfig(**train_kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from None
    _validate_extra(extra)
    return ExperimentConfig(model, train, extra)


def _validate_extra(extra):
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(f"{key} {msg}", key=key)

    need(isinstance(extra["train.k"], int) and extra["train.k"] >= 2, "train.k", "must be >= 2")
    need(isinstance(extra["train.runs"], int) and extra["train.runs"] >= 1, "train.runs",
         "must be >= 1")
    need(0 < extra["data.val_fraction"] < 1, "data.val_fraction", "must be in (0, 1)")
    need(extra["data.split"] in ("train", "test"), "data.split", "must be train or test")
    need(extra["data.synthetic_n"] >= 4 and extra["data.synthetic_n"] % 2 == 0,
         "data.synthetic_n", "must be an even number >= 4")
    need(extra["data.synthetic_task"] in ("opacity", "position"), "data.synthetic_task",
         "must be opacity or position")
    for key in ("sweep.learning_rates", "sweep.batch_sizes", "sweep.trainable_layers"):
        need(isinstance(extra[key], list) and extra[key], key, "must be a non-empty list")
    need(all(isinstance(v, (int, float)) and v > 0 for v in extra["sweep.learning_rates"]),
         "sweep.learning_rates", "must hold positive numbers")
    need(all(isinstance(v, int) and v >= 1 for v in extra["sweep.batch_sizes"]),
         "sweep.batch_sizes", "must hold integers >= 1")
    need(all(v is None or (isinstance(v, int) and v >= 0) for v in extra["sweep.trainable_layers"]),
         "sweep.trainable_layers", "must hold integers >= 0 or null (all layers)")


def load_config(path, desk=False):
    try:
        with open(path, encoding="utf-8") as fh:
            flat = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(flat, dict):
        raise ConfigError(f"config {path} must be a JSON object of dotted keys")
    return from_flat(flat, desk)
