# core/config.py
from __future__ import annotations
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional
import copy
import os

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from core.errors import ConfigError
from core.trainer import TrainConfig, make_train_config
from core.utils import parse_nu

_DEFAULTS: Dict[str, Any] = {
    "experiment": {
        "out_dir": "runs/default",
        "seed": 0,
        "replicates": 12,
        "jobs": 1,
        "emit_svg": False,
        "log_level": "INFO",
    },
    "data": {"n": 10, "d": 2, "d_out": 2, "noise": 0.2, "path": None},
    "model": {"q": 30, "q_int": 64, "nu": 2.5, "L": 32, "embedding": "block"},
    "train": {
        "eta": 1.0,
        "max_steps": 500,
        "target_loss": 1e-10,
        "eta_min": 1e-12,
        "init_scale": 0.0,
        "R": 1.0,
        "kappa_bound": "quartic",
        "track_lambda": True,
        "log_every": 50,
    },
    "sweep": {
        "q_values": [2, 8, 32],
        "q_int_factor": 2,
        "fixed_q": 30,
        "q_int_values": [8, 30, 120],
    },
    "diagnose": {
        "R": 1.0,
        "embedding": "canonical",
        "checkpoint": None,
        "q_values": [2, 4, 8, 16, 32, 64, 128, 256, 512, 1024],
    },
    "selftest": {"negative_control": False, "nu_values": [3.0, "inf"], "fast": False},
}


def _deep_update(base: Dict[str, Any], new: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None = "config/app.yaml") -> Dict[str, Any]:
    cfg = copy.deepcopy(_DEFAULTS)
    if path is not None:
        p = Path(path)
        if p.exists():
            # safe_load also reads plain JSON objects
            with open(p, "r", encoding="utf-8") as f:
                try:
                    file_cfg = yaml.safe_load(f) or {}
                except yaml.YAMLError as e:
                    raise ConfigError(f"{p}: {e}") from e
            if not isinstance(file_cfg, dict):
                raise ConfigError(f"{p}: top level must be a mapping")
            cfg = _deep_update(cfg, file_cfg)
        elif str(path) != "config/app.yaml":
            raise ConfigError(f"config file not found: {p}")

    # Optional env overrides (useful in CI/containers)
    exp = cfg["experiment"]
    exp["out_dir"] = os.getenv("RKHS_OUT_DIR", exp["out_dir"])
    exp["jobs"] = int(os.getenv("RKHS_JOBS", exp["jobs"]))
    exp["seed"] = int(os.getenv("RKHS_SEED", exp["seed"]))
    exp["log_level"] = os.getenv("RKHS_LOG_LEVEL", exp["log_level"])
    exp["emit_svg"] = _to_bool(os.getenv("RKHS_EMIT_SVG", str(exp["emit_svg"])))
    cfg["train"]["eta"] = float(os.getenv("RKHS_ETA", cfg["train"]["eta"]))
    cfg["train"]["max_steps"] = int(os.getenv("RKHS_MAX_STEPS", cfg["train"]["max_steps"]))
    return cfg


def _to_bool(v: str) -> bool:
    return str(v).strip().lower() in {"1", "true", "yes", "y", "on"}


def dump_config(cfg: Dict[str, Any], path: str | Path) -> Path:
    p = Path(path)
    with open(p, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg, f, sort_keys=False)
    return p


# -------------------------
# Typed views
# -------------------------
class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    out_dir: str
    seed: int = 0
    replicates: int = 12
    jobs: int = 1
    emit_svg: bool = False
    n: int = 10
    d: int = 2
    d_out: int = 2
    noise: float = 0.2
    data_path: Optional[str] = None
    q_values: List[int]
    q_int_factor: int = 2
    fixed_q: int = 30
    q_int_values: List[int]
    diagnose_R: float = 1.0
    diagnose_embedding: Literal["canonical", "block"] = "canonical"
    diagnose_q_values: List[int]
    checkpoint: Optional[str] = None
    negative_control: bool = False
    selftest_nu: List[float]
    selftest_fast: bool = False
    train: TrainConfig

    @field_validator("q_values", "q_int_values", "diagnose_q_values")
    @classmethod
    def _nonempty(cls, v):
        if not v or any(x < 1 for x in v):
            raise ValueError("sweep lists must be nonempty lists of positive integers")
        return v

    @field_validator("replicates", "jobs", "n", "d", "d_out", "q_int_factor", "fixed_q")
    @classmethod
    def _at_least_one(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("selftest_nu", mode="before")
    @classmethod
    def _nus(cls, v):
        return [parse_nu(x) for x in v]


def train_config(cfg: Dict[str, Any], **overrides) -> TrainConfig:
    kw = dict(cfg["model"])
    kw.update({k: v for k, v in cfg["train"].items()})
    kw["seed"] = cfg["experiment"]["seed"]
    kw.update(overrides)
    return make_train_config(**kw)


def experiment_config(cfg: Dict[str, Any], **overrides) -> ExperimentConfig:
    exp, data, sweep, diag, st = (cfg["experiment"], cfg["data"], cfg["sweep"],
                                  cfg["diagnose"], cfg["selftest"])
    kw = dict(
        out_dir=str(exp["out_dir"]), seed=exp["seed"], replicates=exp["replicates"],
        jobs=exp["jobs"], emit_svg=exp["emit_svg"],
        n=data["n"], d=data["d"], d_out=data["d_out"], noise=data["noise"], data_path=data["path"],
        q_values=sweep["q_values"], q_int_factor=sweep["q_int_factor"], fixed_q=sweep["fixed_q"],
        q_int_values=sweep["q_int_values"],
        diagnose_R=diag["R"], diagnose_embedding=diag["embedding"],
        diagnose_q_values=diag["q_values"], checkpoint=diag["checkpoint"],
        negative_control=st["negative_control"], selftest_nu=st["nu_values"], selftest_fast=st["fast"],
        train=train_config(cfg),
    )
    kw.update(overrides)
    try:
        return ExperimentConfig(**kw)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
