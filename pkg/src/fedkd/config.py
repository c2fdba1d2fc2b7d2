"""Experiment configuration: one JSON file plus dotted-path overrides."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path

from fedkd.data import CohortSpec, NormalizationSpec
from fedkd.federation import DEFAULT_TEST_CLIENTS, RoundConfig
from fedkd.nn import LossConfig, ModelArch
from fedkd.tasks import FEDERATED_TASKS, TaskKind, parse_task

OUTPUT_DIR_ENV = "FEDKD_OUTPUT_DIR"
STAGES = ("teacher", "student", "finetune", "local", "downstream")


class ConfigError(ValueError):
    pass


def _arch_block(layers=(96,), taps=(0,)):
    return {"backbone_layers": list(layers), "activation": "relu", "deep_supervision_taps": list(taps)}


DEFAULTS = {
    "master_seed": 0,
    "output_dir": "runs/default",
    "cohort": {
        "n_clients": 8,
        "samples_per_client": None,
        "label_fraction": None,
        "landmark_noise_mm": None,
        "domain_shift": None,
        "grid_shape": [24, 24],
        "spacing_mm": [2.0, 2.0],
        "test_fraction": 0.2,
        "morphology": "standard",
        "client_ids": None,
    },
    "matrix": {"test_clients": {t.value: sorted(c) for t, c in DEFAULT_TEST_CLIENTS.items()}},
    "rounds": {
        "teacher": {"n_rounds": 20, "local_epochs": 10, "batch_size": 8, "aggregation": "fedprox", "mu": 0.01,
                    "lr": 0.01, "weight_decay": 0.01},
        "student": {"n_rounds": 20, "local_epochs": 10, "batch_size": 8, "aggregation": "fedprox", "mu": 0.01,
                    "lr": 0.003, "weight_decay": 0.01},
        "finetune": {"n_rounds": 10, "local_epochs": 10, "batch_size": 8, "aggregation": "fedprox", "mu": 0.01,
                     "lr": 0.01, "weight_decay": 0.01},
        "local": {"n_rounds": 20, "local_epochs": 10, "batch_size": 8, "aggregation": "fedprox", "mu": 0.01,
                  "lr": 0.01, "weight_decay": 0.01},
        "downstream": {"n_rounds": 10, "local_epochs": 10, "batch_size": 8, "aggregation": "fedavg", "mu": 0.0,
                       "lr": 0.01, "weight_decay": 0.01},
    },
    "archs": {"teacher": _arch_block(), "student": _arch_block(layers=(192,))},
    "loss": {"ce_weight": 1.0, "dice_weight": 1.0, "deep_supervision_weights": [0.5], "dice_smooth": 1e-6,
             "ce_eps": 1e-7},
    "norm": {"clip_lo": -1024.0, "clip_hi": 696.0, "mu": -438.61, "sigma": 520.98},
    "sigma_mm": 2.0,
    "transport": {"kind": "inproc", "address": "127.0.0.1:0", "poll_interval": 0.01, "round_timeout": 600.0,
                  "max_frame": 64 * 1024 * 1024},
    "downstream": {"n_samples": 60, "test_fraction": 0.5, "baseline": "Calcification"},
}

# blocks whose values are free-form (no key checking below them)
_OPAQUE = {"cohort.label_fraction", "cohort.domain_shift", "matrix.test_clients"}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and where not in _OPAQUE:
            if not isinstance(v, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, assignment: str) -> dict:
    """``"rounds.teacher.n_rounds=5"`` -> nested update; values parse as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    patch = node = {}
    for p in parts[:-1]:
        node[p] = {}
        node = node[p]
    node[parts[-1]] = _parse_value(value)
    return _merge(raw, patch)


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, obj: dict, overrides=()) -> "ExperimentConfig":
        raw = _merge(DEFAULTS, obj or {})
        for o in overrides:
            raw = apply_override(raw, o)
        cfg = cls(raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides=()) -> "ExperimentConfig":
        obj = {}
        if path is not None:
            try:
                obj = json.loads(Path(path).read_text())
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: {e}") from None
            except OSError as e:
                raise ConfigError(f"cannot read config: {e}") from None
        return cls.from_dict(obj, overrides)

    # derived records

    @property
    def master_seed(self) -> int:
        return int(self.raw["master_seed"])

    @property
    def output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.raw["output_dir"])

    def cohort(self) -> CohortSpec:
        kw = {k: v for k, v in self.raw["cohort"].items() if v is not None}
        return CohortSpec(seed=self.master_seed, **kw)

    def rounds(self, stage: str) -> RoundConfig:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        return RoundConfig(seed=self.master_seed, **self.raw["rounds"][stage])

    def loss(self) -> LossConfig:
        return LossConfig(**self.raw["loss"])

    def norm(self) -> NormalizationSpec:
        return NormalizationSpec(**self.raw["norm"])

    @property
    def sigma_mm(self) -> float:
        return float(self.raw["sigma_mm"])

    def arch(self, role: str, tasks=FEDERATED_TASKS) -> ModelArch:
        a = self.raw["archs"][role]
        return ModelArch.for_tasks(tuple(self.raw["cohort"]["grid_shape"]), tuple(a["backbone_layers"]),
                                   [parse_task(t) for t in tasks], activation=a["activation"],
                                   deep_supervision_taps=tuple(a["deep_supervision_taps"]))

    def test_clients(self) -> dict:
        return {parse_task(t): frozenset(int(c) for c in cs) for t, cs in self.raw["matrix"]["test_clients"].items()}

    @property
    def downstream_baseline(self) -> TaskKind:
        return parse_task(self.raw["downstream"]["baseline"])

    def validate(self):
        try:
            spec = self.cohort()
            for s in STAGES:
                self.rounds(s)
            loss = self.loss()
            self.norm()
            archs = {r: self.arch(r) for r in ("teacher", "student")}
            tc = self.test_clients()
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(str(e)) from None
        for t, cs in tc.items():
            if t not in FEDERATED_TASKS:
                raise ConfigError(f"matrix.test_clients names non-federated task {t.value}")
            unknown = set(cs) - set(spec.client_ids)
            if unknown:
                raise ConfigError(f"matrix.test_clients[{t.value}] names unknown clients {sorted(unknown)}")
        for role, a in archs.items():
            missing = set(tc) - set(a.head_specs)
            if missing:
                raise ConfigError(f"{role} arch lacks heads for {sorted(m.value for m in missing)}")
            n_taps = len(a.deep_supervision_taps)
            if any(loss.deep_supervision_weights) and len(loss.deep_supervision_weights) != n_taps:
                raise ConfigError(f"loss.deep_supervision_weights has {len(loss.deep_supervision_weights)} entries "
                                  f"but archs.{role} has {n_taps} taps")
        if self.raw["transport"]["kind"] not in ("inproc", "tcp"):
            raise ConfigError("transport.kind must be inproc or tcp")
        if self.downstream_baseline not in FEDERATED_TASKS:
            raise ConfigError("downstream.baseline must be a federated task")

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=1, sort_keys=True) + "\n"
