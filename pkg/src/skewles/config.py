"""Experiment configuration: a dataclass with a plain ``key = value`` file format."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

import torch


@dataclass
class ExperimentConfig:
    # grids and physics
    fine_n: int = 256
    coarse: tuple = (64, 32)
    train_coarse: int = 64
    dt: float = 2e-3
    dt_multiplier: int = 10
    nu: float = 1e-3
    kappa_max: float = 10.0
    target_energy: float = 1.2
    # training data
    n_train_sims: int = 2
    t_train: float = 2.0
    train_seed: int = 0
    dns_dtype: str = "float64"
    # training
    variants: tuple = ("SKEW",)
    epochs: int = 50
    batch_size: int = 20
    n_unroll: int = 5
    lr: float = 1e-3
    model_seed: int = 0
    hidden: int = 32
    n_hidden: int = 4
    train_dtype: str = "float32"
    # evaluation
    les_dtype: str = "float32"
    eval_seed: int = 1000
    eval_factor: float = 2.0
    cs: float = 0.22
    cs_min: float = 0.0
    cs_max: float = 0.30
    cs_step: float = 0.01
    t_calibrate: float = 2.0
    # ensemble
    n_replicas: int = 3
    ensemble_epochs: int = 5
    ensemble_variants: tuple = ("SKEW", "CNN")
    # kolmogorov flow
    kf_seed: int = 2000
    kf_warmup: float = 10.0
    kf_horizon: float = 100.0
    kf_fdns_horizon: float = 0.0
    kf_spectrum_every: int = 50
    kf_variants: tuple = ("NC", "SMAG", "SKEW", "CNNC")

    def __post_init__(self):
        for n in (self.fine_n, *self.coarse, self.train_coarse):
            if n <= 0 or n & (n - 1):
                raise ValueError(f"resolution {n} is not a power of two")
            if self.fine_n % n:
                raise ValueError(f"coarse resolution {n} does not divide {self.fine_n}")
        if self.train_coarse not in self.coarse:
            raise ValueError("train_coarse must be one of the coarse resolutions")
        if self.dt_multiplier < 1 or int(self.dt_multiplier) != self.dt_multiplier:
            raise ValueError("dt_multiplier must be a positive integer")

    @property
    def dt_coarse(self) -> float:
        return self.dt * self.dt_multiplier

    @property
    def t_eval(self) -> float:
        return self.eval_factor * self.t_train

    def torch_dtype(self, name: str) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[getattr(self, name)]

    def cs_grid(self) -> list[float]:
        n = int(round((self.cs_max - self.cs_min) / self.cs_step))
        return [round(self.cs_min + k * self.cs_step, 10) for k in range(n + 1)]

    # ---- text format -------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> "ExperimentConfig":
        raw = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected key = value")
            k, v = line.split("=", 1)
            raw[k.strip()] = v.strip()
        raw.update(overrides or {})
        return cls(**parse_values(raw))

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), overrides)


def parse_values(raw: dict) -> dict:
    defaults = {f.name: f.default for f in fields(ExperimentConfig)}
    out = {}
    for k, v in raw.items():
        if k not in defaults:
            raise KeyError(f"unknown config key {k!r}")
        d = defaults[k]
        if not isinstance(v, str):
            out[k] = v
        elif isinstance(d, tuple):
            items = [x.strip() for x in v.split(",") if x.strip()]
            out[k] = tuple(int(x) for x in items) if d and isinstance(d[0], int) else tuple(items)
        elif isinstance(d, bool):
            out[k] = v.lower() in ("1", "true", "yes")
        elif isinstance(d, int):
            out[k] = int(v)
        elif isinstance(d, float):
            out[k] = float(v)
        else:
            out[k] = v
    return out
