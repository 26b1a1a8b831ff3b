"""INI run configuration: sections [data], [model], [train], [run].

Unknown sections or keys are rejected. A ``profile`` key in [run] selects
a set of defaults which explicit keys then override.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .data import (
    Dataset,
    TaskSequence,
    even_task_classes,
    load_cifar_dataset,
    load_digits_dataset,
    load_idx_dataset,
    parse_task_classes,
    split_by_class,
    synth_blobs,
)
from .losses import LossWeights
from .model import ModelConfig
from .replay import RepulsionConfig
from .trainer import DATA_SEED, TrainConfig

SOURCES = ("synthetic", "digits", "idx", "cifar")

PATH_KEYS = ("train_images", "train_labels", "test_images", "test_labels", "cifar_train", "cifar_test")

SCHEMA: dict[str, dict[str, type]] = {
    "data": {
        "source": str, "tasks": str, "task_count": int,
        "class_count": int, "samples_per_class": int, "test_per_class": int,
        "image_side": int, "noise": float,
        "train_images": str, "train_labels": str, "test_images": str, "test_labels": str,
        "cifar_train": str, "cifar_test": str, "cifar_label_bytes": int,
    },
    "model": {"latent_dim": int, "hidden_sizes": str, "class_capacity": int},
    "train": {
        "iterations_per_task": int, "batch_size": int, "replay_batch_size": int,
        "lr": float, "beta1": float, "beta2": float, "adam_eps": float,
        "lambda_r": float, "lambda_d": float, "lambda_rr": float, "lambda_ra": float,
        "repulsion_factor": float, "seed": int, "variant": str, "replay": bool,
        "log_every": int, "eval_every": int,
    },
    "run": {"profile": str, "out": str, "f_sweep": str},
}

_COMMON = {
    "model": {"latent_dim": "32", "hidden_sizes": "256,256"},
    "train": {
        "lr": "0.001", "beta1": "0.9", "beta2": "0.999", "adam_eps": "1e-08",
        "lambda_r": "1.0", "lambda_d": "1.0", "lambda_rr": "1e-06", "lambda_ra": "1e-06",
        "repulsion_factor": "20.0", "seed": "0", "variant": "baseline", "replay": "true",
        "log_every": "1", "eval_every": "0",
    },
    "run": {"out": "runs", "f_sweep": "5,10,20,50,100"},
}

PROFILES: dict[str, dict[str, dict[str, str]]] = {
    # Split-MNIST, 5 tasks x 2 classes
    "desk": {
        "data": {"source": "idx", "task_count": "5"},
        "train": {"iterations_per_task": "2000", "batch_size": "128"},
    },
    # CIFAR-100 in 10 tasks, 5000 iterations, batches of 512
    "cifar100": {
        "data": {"source": "cifar", "task_count": "10", "cifar_label_bytes": "2"},
        "model": {"class_capacity": "100"},
        "train": {"iterations_per_task": "5000", "batch_size": "512"},
    },
}


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class RunConfig:
    values: dict[str, dict[str, str]]
    base_dir: Path = field(default_factory=Path.cwd)

    def get(self, section: str, key: str, default=None):
        raw = self.values.get(section, {}).get(key)
        if raw is None:
            return default
        kind = SCHEMA[section][key]
        name = f"[{section}] {key}"
        try:
            if kind is bool:
                lowered = raw.strip().lower()
                if lowered not in ("true", "false", "yes", "no", "1", "0"):
                    raise ValueError(raw)
                return lowered in ("true", "yes", "1")
            return kind(raw)
        except ValueError:
            raise ConfigError(name, f"expected {kind.__name__}, got {raw!r}") from None

    def set(self, section: str, key: str, value) -> None:
        if key not in SCHEMA.get(section, {}):
            raise ConfigError(f"[{section}] {key}", "unknown key")
        self.values.setdefault(section, {})[key] = str(value).lower() if isinstance(value, bool) else str(value)

    def path(self, section: str, key: str) -> Path:
        raw = self.get(section, key)
        if raw is None:
            raise ConfigError(f"[{section}] {key}", "required path is missing")
        p = Path(raw)
        p = p if p.is_absolute() else self.base_dir / p
        if not p.exists():
            raise ConfigError(f"[{section}] {key}", f"file not found: {p}")
        return p

    @property
    def seed(self) -> int:
        return self.get("train", "seed", 0)

    @property
    def f_sweep(self) -> list[float]:
        return parse_f_list(self.get("run", "f_sweep", ""), "[run] f_sweep")

    def dump(self, path) -> None:
        parser = configparser.ConfigParser(interpolation=None)
        for section in SCHEMA:
            items = dict(sorted(self.values.get(section, {}).items()))
            for key in PATH_KEYS:
                if section == "data" and key in items and not Path(items[key]).is_absolute():
                    items[key] = str((self.base_dir / items[key]).resolve())
            if items:
                parser[section] = items
        with Path(path).open("w") as fh:
            parser.write(fh)

    def load_dataset(self) -> Dataset:
        source = self.get("data", "source")
        seed = self.seed + DATA_SEED
        if source == "synthetic":
            return synth_blobs(
                self.get("data", "class_count", 4), self.get("data", "samples_per_class", 100),
                self.get("data", "image_side", 8), seed, self.get("data", "noise", 0.1),
                self.get("data", "test_per_class", None),
            )
        if source == "digits":
            return load_digits_dataset(seed)
        if source == "idx":
            return load_idx_dataset(*(self.path("data", k) for k in
                                      ("train_images", "train_labels", "test_images", "test_labels")))
        if source == "cifar":
            return load_cifar_dataset(self.path("data", "cifar_train"), self.path("data", "cifar_test"),
                                      self.get("data", "cifar_label_bytes", 1))
        raise ConfigError("[data] source", f"must be one of {SOURCES}, got {source!r}")

    def task_sequence(self, ds: Dataset) -> TaskSequence:
        text = self.get("data", "tasks")
        if text:
            classes = parse_task_classes(text)
        else:
            try:
                classes = even_task_classes(ds.class_count, self.get("data", "task_count", 1))
            except ValueError as err:
                raise ConfigError("[data] task_count", str(err)) from None
        try:
            return split_by_class(ds, classes)
        except ValueError as err:
            raise ConfigError("[data] tasks", str(err)) from None

    def model_config(self, ds: Dataset) -> ModelConfig:
        hidden = tuple(int(h) for h in self.get("model", "hidden_sizes").split(",") if h.strip())
        try:
            return ModelConfig(ds.feature_count, self.get("model", "latent_dim"), hidden,
                               self.get("model", "class_capacity", ds.class_count), ds.image_shape)
        except ValueError as err:
            raise ConfigError("[model]", str(err)) from None

    def train_config(self) -> TrainConfig:
        g = lambda key, default=None: self.get("train", key, default)  # noqa: E731
        try:
            return TrainConfig(
                iterations_per_task=g("iterations_per_task"), batch_size=g("batch_size"),
                replay_batch_size=g("replay_batch_size"), lr=g("lr"), beta1=g("beta1"),
                beta2=g("beta2"), adam_eps=g("adam_eps"),
                weights=LossWeights(g("lambda_r"), g("lambda_d"), g("lambda_rr"), g("lambda_ra")),
                repulsion=RepulsionConfig(g("repulsion_factor")),
                seed=g("seed"), variant=g("variant"), replay=g("replay"),
                log_every=g("log_every"), eval_every=g("eval_every"),
            )
        except ValueError as err:
            raise ConfigError("[train]", str(err)) from None


def parse_f_list(text: str, field: str = "--f") -> list[float]:
    try:
        values = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(field, f"not a comma-separated list of numbers: {text!r}") from None
    if not values:
        raise ConfigError(field, "empty repulsion factor list")
    if len(set(values)) != len(values):
        raise ConfigError(field, f"duplicate repulsion factors in {values}")
    bad = [v for v in values if not v >= 1]
    if bad:
        raise ConfigError(field, f"repulsion factors must be >= 1, got {bad}")
    return values


def from_mapping(values: dict[str, dict[str, str]], base_dir=None) -> RunConfig:
    for section, items in values.items():
        if section not in SCHEMA:
            raise ConfigError(f"[{section}]", "unknown section")
        for key in items:
            if key not in SCHEMA[section]:
                raise ConfigError(f"[{section}] {key}", "unknown key")
    profile = values.get("run", {}).get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError("[run] profile", f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    merged: dict[str, dict[str, str]] = {s: {} for s in SCHEMA}
    for layer in (_COMMON, PROFILES[profile], values):
        for section, items in layer.items():
            merged[section].update({k: str(v) for k, v in items.items()})
    merged["run"]["profile"] = profile
    cfg = RunConfig(merged, Path(base_dir) if base_dir else Path.cwd())
    # type-check every key up front
    for section, items in merged.items():
        for key in items:
            cfg.get(section, key)
    if cfg.get("data", "source") not in SOURCES:
        raise ConfigError("[data] source", f"must be one of {SOURCES}")
    cfg.train_config()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--config", f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as err:
        raise ConfigError(str(path), f"unparseable config: {err}") from None
    values = {s: dict(parser[s]) for s in parser.sections()}
    return from_mapping(values, base_dir=path.parent)
