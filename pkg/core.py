import os
import hashlib
import logging
from datetime import datetime
from typing import List, Literal, Optional

import pytz
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

# --- CONFIGURATION ---
load_dotenv()
LOG_LEVEL = os.getenv("LSSKD_LOG_LEVEL", "INFO").upper()
DATA_DIR = os.getenv("LSSKD_DATA_DIR", "data")
OUT_DIR = os.getenv("LSSKD_OUT_DIR", "runs")
LEDGER_URL = os.getenv("LSSKD_LEDGER_URL")
LEDGER_TZ = pytz.timezone(os.getenv("LSSKD_TZ", "UTC"))

# --- LOGGING ---
logging.basicConfig(level=getattr(logging, LOG_LEVEL, logging.INFO), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
logger = logging.getLogger("lsskd")

# name -> (classes, image shape, channel means, channel stds)
DATASET_DEFAULTS = {
    "cifar10": (10, (3, 32, 32), (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": (100, (3, 32, 32), (0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    "mnist": (10, (1, 28, 28), (0.1307,), (0.3081,)),
}
FEWSHOT_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


# --- ERRORS ---
class LsskdError(Exception):
    exit_code = 1

class ConfigError(LsskdError):
    exit_code = 2

class FormatError(LsskdError):
    exit_code = 2

class DataError(LsskdError):
    exit_code = 3

class NumericError(LsskdError):
    exit_code = 4

class ShapeError(LsskdError, ValueError):
    exit_code = 4

class GradcheckError(LsskdError):
    exit_code = 5

class ComparisonError(LsskdError):
    exit_code = 6


# --- HELPER FUNCTIONS ---
def get_current_time():
    return datetime.now(LEDGER_TZ)


# --- SETTINGS ---
class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSettings(_Section):
    name: Literal["cifar10", "cifar100", "mnist"] = "cifar10"
    dir: str = DATA_DIR
    mean: List[float] = Field(default_factory=list)
    std: List[float] = Field(default_factory=list)
    train_limit: int = Field(0, ge=0)
    test_limit: int = Field(0, ge=0)

    @model_validator(mode="before")
    @classmethod
    def _fill_normalization(cls, data):
        if isinstance(data, dict) and data.get("name", "cifar10") in DATASET_DEFAULTS:
            _, _, mean, std = DATASET_DEFAULTS[data.get("name", "cifar10")]
            data = {**data, "mean": data.get("mean") or list(mean), "std": data.get("std") or list(std)}
        return data

    @model_validator(mode="after")
    def _check_normalization(self):
        shape = DATASET_DEFAULTS[self.name][1]
        if len(self.mean) != shape[0] or len(self.std) != shape[0]:
            raise ValueError(f"{self.name} has {shape[0]} channels; mean/std must list one value per channel")
        if any(s <= 0 for s in self.std): raise ValueError("dataset.std values must be positive")
        return self

    @property
    def num_classes(self) -> int:
        return DATASET_DEFAULTS[self.name][0]

    @property
    def image_shape(self):
        return DATASET_DEFAULTS[self.name][1]


class FewshotSettings(_Section):
    fraction: float = 1.0

    @model_validator(mode="after")
    def _check_fraction(self):
        if self.fraction not in FEWSHOT_FRACTIONS: raise ValueError(f"fewshot.fraction must be one of {FEWSHOT_FRACTIONS}")
        return self


class ModelSettings(_Section):
    stages: int = Field(3, ge=2)
    channels: List[int] = Field(default_factory=lambda: [16, 32, 64])
    blocks: int = Field(2, ge=1)
    transforms: int = Field(4, ge=1, le=4)

    @model_validator(mode="after")
    def _check_channels(self):
        if len(self.channels) != self.stages: raise ValueError("model.channels must list one width per stage")
        if any(c < 1 for c in self.channels): raise ValueError("model.channels must be positive")
        return self


class TrainSettings(_Section):
    epochs: int = Field(240, ge=1)
    batch: int = Field(64, ge=1)
    lr0: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    wd: float = Field(5e-5, ge=0)
    milestones: List[int] = Field(default_factory=lambda: [150, 210])
    decay: float = Field(0.1, gt=0, le=1)
    mode: Literal["lsskd", "baseline"] = "lsskd"

    @model_validator(mode="after")
    def _check_milestones(self):
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])): raise ValueError("train.milestones must be strictly increasing")
        if ms and (ms[0] < 1 or ms[-1] >= self.epochs): raise ValueError("train.milestones must lie in [1, train.epochs)")
        return self


class Hyperparams(_Section):
    alpha: float = Field(0.8, ge=0, le=1)
    beta: float = Field(0.1, ge=0, le=1)
    gamma: float = Field(0.1, ge=0)
    tau_kd: float = Field(3.0, gt=0)
    tau_ce: float = Field(1.0, gt=0)
    alpha_warmup: bool = False
    kl_direction: Literal["shallow_deep", "deep_shallow"] = "shallow_deep"


class OutSettings(_Section):
    dir: str = OUT_DIR
    wall_clock: bool = True


class RuntimeSettings(_Section):
    precision: Literal[32, 64] = 32


class Settings(_Section):
    dataset: DatasetSettings = Field(default_factory=DatasetSettings)
    fewshot: FewshotSettings = Field(default_factory=FewshotSettings)
    model: ModelSettings = Field(default_factory=ModelSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    distill: Hyperparams = Field(default_factory=Hyperparams)
    out: OutSettings = Field(default_factory=OutSettings)
    runtime: RuntimeSettings = Field(default_factory=RuntimeSettings)
    seed: int = Field(0, ge=0)

    def override(self, **changes) -> "Settings":
        """Return a copy with dotted keys replaced, e.g. override(**{"train.epochs": 2})."""
        data = self.model_dump()
        for key, value in changes.items():
            section, _, field = key.rpartition(".")
            (data[section] if section else data)[field] = value
        return _validate(data, "<override>")


# --- CONFIG FILE ---
# key -> value kind; order is the serialization order
CONFIG_KEYS = {
    "dataset.name": "str", "dataset.dir": "str", "dataset.mean": "float_list", "dataset.std": "float_list",
    "dataset.train_limit": "int", "dataset.test_limit": "int",
    "fewshot.fraction": "float",
    "model.stages": "int", "model.channels": "int_list", "model.blocks": "int", "model.transforms": "int",
    "train.epochs": "int", "train.batch": "int", "train.lr0": "float", "train.momentum": "float", "train.wd": "float",
    "train.milestones": "int_list", "train.decay": "float", "train.mode": "str",
    "distill.alpha": "float", "distill.beta": "float", "distill.gamma": "float", "distill.tau_kd": "float", "distill.tau_ce": "float",
    "distill.alpha_warmup": "bool", "distill.kl_direction": "str",
    "seed": "int",
    "out.dir": "str", "out.wall_clock": "bool",
    "runtime.precision": "int",
}
ARCHITECTURE_KEYS = ("dataset.name", "model.stages", "model.channels", "model.blocks", "model.transforms")


def _convert(key: str, kind: str, raw: str, where: str):
    try:
        if kind == "str": return raw
        if kind == "int": return int(raw)
        if kind == "float": return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "yes", "1"): return True
            if raw.lower() in ("false", "no", "0"): return False
            raise ValueError(raw)
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return [int(s) for s in items] if kind == "int_list" else [float(s) for s in items]
    except ValueError:
        raise ConfigError(f"{where}: {key} expects {kind.replace('_', ' ')}, got {raw!r}")


def _validate(data: dict, where: str) -> Settings:
    try: return Settings.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"{where}: {problems}")


def parse_config(text: str, where: str = "<config>") -> Settings:
    data: dict = {}; seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line: continue
        if "=" not in line: raise ConfigError(f"{where}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS: raise ConfigError(f"{where}:{lineno}: unknown key {key!r}")
        if key in seen: raise ConfigError(f"{where}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        value = _convert(key, CONFIG_KEYS[key], raw, f"{where}:{lineno}")
        section, _, field = key.rpartition(".")
        (data.setdefault(section, {}) if section else data)[field] = value
    return _validate(data, where)


def load_config(path: str) -> Settings:
    if not os.path.isfile(path): raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read(), path)


def _lookup(settings: Settings, key: str):
    section, _, field = key.rpartition(".")
    return getattr(getattr(settings, section) if section else settings, field)


def _format(value) -> str:
    if isinstance(value, bool): return "true" if value else "false"
    if isinstance(value, (list, tuple)): return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(settings: Settings, keys=None) -> str:
    return "".join(f"{key} = {_format(_lookup(settings, key))}\n" for key in (keys or CONFIG_KEYS))


def config_digest(settings: Settings) -> bytes:
    return hashlib.sha256(dump_config(settings, ARCHITECTURE_KEYS).encode("utf-8")).digest()
