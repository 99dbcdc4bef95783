"""Plain-text experiment configs: one ``key = value`` per line, ``#`` comments."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import InputError, PSDError
from .model import Hyperparams, Mode
from .solvers import SolveOptions
from .training import TrainConfig

_TYPES = {
    "n": int,
    "m": int,
    "lambda": float,
    "alpha": float,
    "eta": float,
    "eta_decay": float,
    "eta_floor": float,
    "epochs": int,
    "seed": int,
    "mode": str,
    "patch_side": int,
    "patch_count": int,
    "tol": float,
    "max_iter": int,
}
REQUIRED = ("m", "lambda", "epochs", "seed")
DEFAULTS = {
    "alpha": 1.0,
    "eta": 0.02,
    "eta_decay": 1e-4,
    "eta_floor": 1e-4,
    "mode": "joint",
    "patch_side": 9,
    "patch_count": 5000,
    "tol": 1e-8,
    "max_iter": 1000,
}


class ConfigError(InputError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def hyper(self) -> Hyperparams:
        return Hyperparams(
            lam=self["lambda"], alpha=self["alpha"], eta=self["eta"], mode=Mode(self["mode"])
        )

    @property
    def solve_options(self) -> SolveOptions:
        return SolveOptions(tol=self["tol"], max_iter=self["max_iter"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(
            hyper=self.hyper,
            code_size=self["m"],
            epochs=self["epochs"],
            seed=self["seed"],
            infer_opts=self.solve_options,
            eta_decay=self["eta_decay"],
            eta_floor=self["eta_floor"],
        )


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _TYPES[key](value)
        except ValueError:
            raise ConfigError(
                f"line {lineno}: {key} = {value!r} is not a valid {_TYPES[key].__name__}"
            ) from None
    missing = [k for k in REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"missing required config key(s): {', '.join(missing)}")
    for key, default in DEFAULTS.items():
        values.setdefault(key, default)
    try:
        Mode(values["mode"])
    except ValueError:
        raise ConfigError(f"mode must be one of {[m.value for m in Mode]}, got {values['mode']!r}") from None
    cfg = ExperimentConfig(values)
    try:
        cfg.train_config  # runs every range check
    except PSDError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
