"""Run configuration: TOML in, schema-validated, defaults filled, frozen snapshot out."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import tomli
import tomli_w

from .core import DomainError, Schedule
from .denoiser import NoiseSpec
from .distill import DistillConfig
from .training import DatasetSpec, TrainConfig

SEED_ENV = "IMDM_SEED"

DEFAULTS = {
    "name": "synthetic",
    "output_dir": "runs",
    "seed": 0,
    "schedule": {"kind": "linear", "clip_eps": 1e-4},
    "noise": {"distribution": "uniform", "dim": 8, "scale": 1.0},
    "model": {"kind": "mdm", "d_model": 16, "width": 64},
    "data": {"kind": "synthetic_pair"},
    "train": {
        "iterations": 20_000,
        "batch_size": 256,
        "learning_rate": 1e-3,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "eval_every": 500,
        "log_floor": -30.0,
    },
    "distill": {
        "rounds": 2,
        "iterations_per_round": 2000,
        "inner_steps": 2,
        "base_steps": 4,
        "kl_direction": "teacher_to_student",
        "target_mode": "exact",
        "mc_rollouts": 256,
        "n_eps_quad": 8,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "coupling_size": 10_000,
        "coupling_steps": 64,
        "coupling_rule": "noise_driven",
        "redi_iterations": 10_000,
        "redi_batch_size": 256,
    },
    "decode": {"steps": 1, "n_samples": 5000, "conditioning": {}, "curve_steps": [1, 2, 4, 8, 16]},
    "analysis": {"n_eps": 10_000, "probe_eps": 1000, "reuse_coupling_eps": False, "bound_s": 0.0, "bound_t": 1.0},
}


class ConfigError(DomainError):
    pass


def _schema(name: str) -> dict:
    return json.loads(resources.files("imdm.schemas").joinpath(name).read_text())


def validate_metrics(metrics: dict) -> None:
    jsonschema.validate(metrics, _schema("metrics.schema.json"))


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "conditioning":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class RunConfig:
    data: dict

    @classmethod
    def from_dict(cls, raw: dict, env: dict | None = None) -> "RunConfig":
        validator = jsonschema.Draft202012Validator(_schema("run_config.schema.json"))
        errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.path))
        if errors:
            lines = [f"{'/'.join(str(p) for p in e.path) or '<root>'}: {e.message}" for e in errors]
            raise ConfigError("invalid config:\n  " + "\n  ".join(lines))
        resolved = _merge(DEFAULTS, raw)
        env = os.environ if env is None else env
        if env.get(SEED_ENV, "").strip():
            try:
                resolved["seed"] = int(env[SEED_ENV])
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV} must be an integer") from exc
            if resolved["seed"] < 0:
                raise ConfigError(f"{SEED_ENV} must be non-negative")
        cfg = cls(resolved)
        cfg.dataset()
        cfg.train_config()
        cfg.distill_config()
        return cfg

    @classmethod
    def load(cls, path, env: dict | None = None) -> "RunConfig":
        try:
            raw = tomli.loads(Path(path).read_text())
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw, env)

    @classmethod
    def default(cls, env: dict | None = None) -> "RunConfig":
        return cls.from_dict({}, env)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def with_overrides(self, **sections) -> "RunConfig":
        return RunConfig(_merge(self.data, sections))

    def schedule(self) -> Schedule:
        s = self.data["schedule"]
        return Schedule(s["kind"], s["clip_eps"])

    def noise_spec(self) -> NoiseSpec:
        n = self.data["noise"]
        return NoiseSpec(n["distribution"], n["dim"], n["scale"])

    def dataset(self) -> DatasetSpec:
        d = self.data["data"]
        if d["kind"] == "synthetic_pair":
            return DatasetSpec.synthetic_pair()
        if "sequences" not in d or "n_data" not in d:
            raise ConfigError("explicit_list data needs n_data and sequences")
        lengths = {len(s) for s in d["sequences"]}
        if len(lengths) != 1:
            raise ConfigError("all sequences must have the same length")
        try:
            return DatasetSpec.explicit(d["n_data"], d["sequences"], d.get("weights"))
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self, seed_offset: int = 0) -> TrainConfig:
        t = self.data["train"]
        try:
            return TrainConfig(seed=self.seed + seed_offset, **t)
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc

    def redi_train_config(self) -> TrainConfig:
        d = self.data["distill"]
        base = self.data["train"]
        return TrainConfig(
            iterations=d["redi_iterations"],
            batch_size=d["redi_batch_size"],
            learning_rate=base["learning_rate"],
            adam_beta1=base["adam_beta1"],
            adam_beta2=base["adam_beta2"],
            adam_eps=base["adam_eps"],
            seed=self.seed + 2,
            eval_every=base["eval_every"],
            log_floor=base["log_floor"],
        )

    def distill_config(self) -> DistillConfig:
        d = self.data["distill"]
        base = self.data["train"]
        sdtt_train = TrainConfig(
            iterations=max(1, d["iterations_per_round"]),
            batch_size=d["batch_size"],
            learning_rate=d["learning_rate"],
            adam_beta1=base["adam_beta1"],
            adam_beta2=base["adam_beta2"],
            adam_eps=base["adam_eps"],
            seed=self.seed + 1,
            eval_every=base["eval_every"],
            log_floor=base["log_floor"],
        )
        keys = ("rounds", "iterations_per_round", "inner_steps", "base_steps", "kl_direction", "target_mode",
                "mc_rollouts", "n_eps_quad", "coupling_size", "coupling_steps", "coupling_rule")
        try:
            return DistillConfig(train=sdtt_train, **{k: d[k] for k in keys})
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc

    def conditioning(self) -> dict[int, int]:
        return {int(k): int(v) for k, v in self.data["decode"]["conditioning"].items()}

    def seeds(self) -> dict[str, int]:
        return {"root": self.seed, "pretrain": self.seed, "sdtt": self.seed + 1, "redi": self.seed + 2}

    def snapshot(self) -> str:
        return tomli_w.dumps(self.data)

    def content_hash(self, *extra: bytes) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.data, sort_keys=True).encode())
        for blob in extra:
            h.update(hashlib.sha256(blob).digest())
        return h.hexdigest()
