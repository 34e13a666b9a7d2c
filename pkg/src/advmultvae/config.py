"""YAML experiment configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .attacker import AttackerConfig
from .data import FORMATS, FormatSpec
from .trainer import TrainConfig

CONFIG_ENV = "ADVMULTVAE_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    ratings: Path
    users: Path
    fmt: FormatSpec = field(default_factory=FormatSpec)
    classes: tuple[str, ...] = ("M", "F")
    min_weight: float = 0.0
    min_user_deg: int = 5
    min_item_deg: int = 5
    item_sample: Optional[int] = None
    n_folds: int = 5
    run_folds: Optional[list[int]] = None
    seed: int = 0
    model: dict = field(default_factory=dict)        # ModelConfig fields except n_items
    train: dict = field(default_factory=dict)        # TrainConfig fields
    adv_train: dict = field(default_factory=dict)    # overrides for the adversarial family
    attacker: dict = field(default_factory=dict)
    lambdas: list[float] = field(default_factory=lambda: [0.0, 0.5, 1.0, 2.0, 4.0])
    grid: dict = field(default_factory=dict)
    out: Path = Path("out")
    workers: int = 1

    def train_config(self, family: str) -> TrainConfig:
        d = dict(self.train)
        if family == "adv-multvae":
            d.update(self.adv_train)
            d.setdefault("selection", "min-adv-bacc")
        else:
            d.setdefault("selection", "best-ndcg")
        d["seed"] = self.seed
        return TrainConfig.from_dict(d)

    def attacker_config(self) -> AttackerConfig:
        return AttackerConfig.from_dict({**self.attacker, "seed": self.seed})

    def folds_to_run(self) -> list[int]:
        return list(range(self.n_folds)) if self.run_folds is None else list(self.run_folds)

    def preprocess_key(self) -> dict:
        return {"fmt": dataclasses.asdict(self.fmt), "classes": list(self.classes),
                "min_weight": self.min_weight, "min_user_deg": self.min_user_deg,
                "min_item_deg": self.min_item_deg, "item_sample": self.item_sample,
                "seed": self.seed}

    def digest(self) -> str:
        d = {k: (str(v) if isinstance(v, Path) else v) for k, v in dataclasses.asdict(self).items()
             if k not in ("out", "workers", "run_folds")}
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


_TOP_KEYS = {"dataset", "preprocess", "folds", "seed", "model", "train", "adv_train",
             "attacker", "sweep", "grid", "output", "workers"}


def _format(spec: Any) -> FormatSpec:
    if spec is None:
        return FormatSpec()
    if isinstance(spec, str):
        try:
            return FORMATS[spec]
        except KeyError:
            raise ConfigError(f"unknown dataset format {spec!r}; known: {sorted(FORMATS)}") from None
    if isinstance(spec, dict):
        base = dict(spec)
        preset = base.pop("preset", None)
        start = _format(preset) if preset else FormatSpec()
        try:
            return dataclasses.replace(start, **base)
        except TypeError as exc:
            raise ConfigError(f"bad format spec: {exc}") from None
    raise ConfigError(f"bad format spec: {spec!r}")


def from_dict(raw: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    ds = raw.get("dataset") or {}
    if "ratings" not in ds or "users" not in ds:
        raise ConfigError("dataset.ratings and dataset.users are required")

    def resolve(p) -> Path:
        p = Path(os.path.expanduser(str(p)))
        return p if p.is_absolute() else base_dir / p

    pre = raw.get("preprocess") or {}
    folds = raw.get("folds") or {}
    sweep = raw.get("sweep") or {}
    lambdas = [float(x) for x in sweep.get("lambdas", [0.0, 0.5, 1.0, 2.0, 4.0])]
    if not lambdas:
        raise ConfigError("sweep.lambdas must not be empty")
    try:
        cfg = ExperimentConfig(
            ratings=resolve(ds["ratings"]), users=resolve(ds["users"]),
            fmt=_format(ds.get("format")), classes=tuple(ds.get("classes", ("M", "F"))),
            min_weight=float(pre.get("min_weight", 0.0)),
            min_user_deg=int(pre.get("min_user_deg", 5)), min_item_deg=int(pre.get("min_item_deg", 5)),
            item_sample=pre.get("item_sample"),
            n_folds=int(folds.get("n", 5)), run_folds=folds.get("run"),
            seed=int(raw.get("seed", 0)),
            model=dict(raw.get("model") or {}), train=dict(raw.get("train") or {}),
            adv_train=dict(raw.get("adv_train") or {}), attacker=dict(raw.get("attacker") or {}),
            lambdas=lambdas, grid=dict(raw.get("grid") or {}),
            out=resolve(raw.get("output", "out")), workers=int(raw.get("workers", 1)),
        )
        # validate the nested sections eagerly
        cfg.train_config("multvae")
        cfg.train_config("adv-multvae")
        cfg.attacker_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(raw or {}, path.parent)
