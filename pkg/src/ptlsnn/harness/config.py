"""Experiment configuration: a flat ``key = value`` text format.

Example::

    # MNIST CNN, N_s = 16
    task = mnist_cnn
    n_s = 16
    t_p = 6
    percentile = 99.9
    bits = off

Blank lines and ``#`` comments are ignored. Unknown keys and out-of-range
values raise :class:`ConfigError` before any computation starts. Any field
can be overridden from the environment as ``PTLSNN_<FIELD>`` (upper case),
e.g. ``PTLSNN_EPOCHS=1`` in CI; command-line flags override both.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from ..nn.layers import ConfigError
from ..nn.net import parse_architecture

ENV_PREFIX = "PTLSNN_"

TASKS = ("mnist_cnn", "mnist_autoencoder", "toy_separation")

PRESETS = {
    "mnist_cnn": dict(
        architecture="28x28-c16s1-c32s2-c32s1-c64s2-800-10",
        n_s=16,
        t_p=6,
        epochs=20,
    ),
    "mnist_autoencoder": dict(
        architecture="784-128-64-32-64-128-784",
        n_s=32,
        t_p=6,
        epochs=300,
        batch_size=32,
        lr_decay_epoch=150,
        ptl_epochs=120,  # six stages at the per-stage cap
    ),
    "toy_separation": dict(
        architecture="561-256-256-1122",
        n_s=32,
        t_p=3,
        epochs=60,
        batch_size=32,
    ),
}


@dataclass
class ExperimentConfig:
    task: str = "mnist_cnn"
    architecture: str = ""
    n_s: int = 16
    t_p: int = 6
    percentile: float = 99.9
    bits: str = "off"
    epochs: int = 20  # analog pre-training epochs
    ptl_epochs: int = 100  # global epoch budget for progressive conversion
    stage_epoch_cap: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    lr_decay_epoch: int = 50  # 0 disables the step decay
    lr_decay_factor: float = 10.0
    seed: int = 0
    calibration_size: int = 512
    data_dir: str = ""  # MNIST IDX directory; empty = $PTLSNN_MNIST_DIR or the bundled subset
    train_limit: int = 0  # 0 = use every training sample
    val_fraction: float = 0.1
    n_train: int = 2000  # toy separation only
    n_test: int = 300  # toy separation only

    @classmethod
    def preset(cls, task, **overrides):
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
        cfg = cls(task=task, **PRESETS[task])
        return cfg.updated(overrides)

    def updated(self, overrides: dict):
        names = {f.name: f for f in fields(self)}
        values = {}
        for key, raw in overrides.items():
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(names[key], raw)
        cfg = dataclasses.replace(self, **values)
        cfg.validate()
        return cfg

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        try:
            parse_architecture(self.architecture)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"bad architecture {self.architecture!r}: {exc}") from None
        checks = [
            (self.n_s >= 1, "n_s must be >= 1"),
            (self.t_p >= 1, "t_p must be >= 1"),
            (0 < self.percentile <= 100, "percentile must be in (0, 100]"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.ptl_epochs >= 0, "ptl_epochs must be >= 0"),
            (self.stage_epoch_cap >= 1, "stage_epoch_cap must be >= 1"),
            (self.batch_size >= 2, "batch_size must be >= 2"),
            (self.lr > 0, "lr must be > 0"),
            (self.lr_decay_epoch >= 0, "lr_decay_epoch must be >= 0"),
            (self.lr_decay_factor >= 1, "lr_decay_factor must be >= 1"),
            (self.seed >= 0, "seed must be >= 0"),
            (self.calibration_size >= 1, "calibration_size must be >= 1"),
            (self.train_limit >= 0, "train_limit must be >= 0"),
            (0 < self.val_fraction < 1, "val_fraction must be in (0, 1)"),
            (self.n_train >= 2 and self.n_test >= 1, "n_train must be >= 2 and n_test >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        self.bits_spec()
        return self

    def bits_spec(self):
        from ..quantization import WeightQuantSpec

        try:
            return WeightQuantSpec.parse(self.bits)
        except ValueError as exc:
            raise ConfigError(f"bad bits value {self.bits!r}: {exc}") from None

    def to_text(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def _coerce(f, raw):
    if not isinstance(raw, str):
        return str(raw) if f.type == "str" else raw
    try:
        if f.type == "int":
            return int(raw)
        if f.type == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{f.name}: cannot parse {raw!r} as {f.type}") from None
    return raw


def parse_config_text(text):
    """``key = value`` lines to a dict (values stay strings)."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def env_overrides(environ=None):
    environ = os.environ if environ is None else environ
    names = {f.name for f in fields(ExperimentConfig)}
    out = {}
    for key, value in environ.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX) :].lower()
            if name in names:
                out[name] = value
    return out


def load_config(path=None, task=None, overrides=None, environ=None):
    """Preset for the task, then the config file, then the environment, then ``overrides``."""
    file_values = {}
    if path is not None:
        with open(path) as fh:
            file_values = parse_config_text(fh.read())
    task = (overrides or {}).get("task") or file_values.get("task") or task or "mnist_cnn"
    cfg = ExperimentConfig.preset(task)
    for layer in (file_values, env_overrides(environ), overrides or {}):
        layer = {k: v for k, v in layer.items() if v is not None}
        cfg = cfg.updated(layer)
    return cfg
