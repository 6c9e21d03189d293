"""Run configuration files: flat ``key = value`` lines with dotted keys.

Blank lines and ``#`` comments are ignored. Reals accept ``a/b`` fractions
(``ball.epsilon = 1/255``). Unknown keys and every constraint violation raise
ConfigError naming the offending key.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Optional

from .attack import AttackConfig, PerturbationBall
from .evolution import EvolutionConfig
from .model import BACKBONES, ModelInitSpec
from .numcore import RandomStream, derive_seed
from .trainer import MODES, TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}

# key -> (type, default)
SCHEMA: dict[str, tuple[str, Any]] = {
    "seed": ("int", 0),
    "mode": ("str", "er_apt"),
    "epochs": ("int", 10),
    "batch_size": ("int", 32),
    "lr_init": ("real", 0.0035),
    "momentum": ("real", 0.9),
    "warmup_epochs": ("int", 1),
    "average_full_population": ("bool", False),
    "kl_reversed": ("bool", False),
    "attack.steps": ("int", 2),
    "attack.step_size": ("real", 1 / 255),
    "attack.random_start": ("bool", False),
    "evolution.N": ("int", 9),
    "evolution.phi": ("real", 0.1),
    "evolution.iterations": ("int", 2),
    "evolution.step_size": ("real", 1 / 255),
    "evolution.init": ("str", "uniform"),
    "ball.epsilon": ("real", 1 / 255),
    "ball.input_lo": ("optreal", None),
    "ball.input_hi": ("optreal", None),
    "weights.alpha_init": ("real", 1.0),
    "weights.beta_init": ("real", 1.5),
    "weights.temperature": ("real", 1.0),
    "model.backbone_kind": ("str", "one-hidden-tanh"),
    "model.prompt_dim": ("int", 8),
    "model.feature_dim": ("int", 16),
    "model.tau_logit": ("real", 0.07),
    "model.init_scale": ("real", 1.0),
    "data.kind": ("str", "two_moons"),
    "data.num_classes": ("int", 2),
    "data.per_class": ("int", 200),
    "data.dim": ("int", 2),
    "data.separation": ("real", 4.0),
    "data.noise_sd": ("real", 0.1),
    "data.k_shot": ("int", 0),
    "eval.steps": ("int", 20),
    "eval.step_size": ("optreal", None),
}


def _parse_value(key: str, kind: str, text: str):
    t = text.strip()
    try:
        if kind == "int":
            return int(t)
        if kind == "real":
            return float(Fraction(t)) if "/" in t else float(t)
        if kind == "optreal":
            if t.lower() in ("", "none"):
                return None
            return float(Fraction(t)) if "/" in t else float(t)
        if kind == "bool":
            return _BOOL[t.lower()]
        return t
    except (ValueError, KeyError, ZeroDivisionError):
        raise ConfigError(key, f"cannot parse {text.strip()!r} as {kind}") from None


def parse_config_text(text: str) -> dict:
    values = {k: v[1] for k, v in SCHEMA.items()}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(key or f"line {lineno}", "expected 'key = value'")
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        if key in seen:
            raise ConfigError(key, "duplicate key")
        seen.add(key)
        values[key] = _parse_value(key, SCHEMA[key][0], value)
    validate(values)
    return values


def load_config(path, seed: Optional[int] = None) -> "RunConfig":
    with open(path) as fh:
        values = parse_config_text(fh.read())
    if seed is not None:
        values["seed"] = seed
    return RunConfig.from_values(values)


def _require(cond: bool, key: str, message: str):
    if not cond:
        raise ConfigError(key, message)


def validate(v: dict) -> None:
    pos_int = ("batch_size", "attack.steps", "evolution.iterations", "model.prompt_dim",
               "model.feature_dim", "data.num_classes", "data.per_class", "data.dim")
    for key in pos_int:
        _require(v[key] >= 1, key, "must be >= 1")
    _require(v["epochs"] >= 0, "epochs", "must be >= 0")
    pos_real = ("lr_init", "attack.step_size", "evolution.step_size", "ball.epsilon", "weights.alpha_init",
                "weights.beta_init", "weights.temperature", "model.tau_logit", "model.init_scale",
                "data.separation")
    for key in pos_real:
        _require(v[key] > 0, key, "must be positive")
    _require(v["seed"] >= 0, "seed", "must be non-negative")
    _require(0.0 <= v["momentum"] < 1.0, "momentum", "must lie in [0, 1)")
    _require(v["warmup_epochs"] >= 0, "warmup_epochs", "must be >= 0")
    _require(v["mode"] in MODES, "mode", f"must be one of {MODES}")
    _require(v["evolution.N"] >= 1 and v["evolution.N"] % 3 == 0, "evolution.N", "must be a positive multiple of 3")
    _require(v["evolution.N"] // 3 >= 2, "evolution.N", "must satisfy N/3 >= 2")
    _require(0.0 <= v["evolution.phi"] <= 1.0, "evolution.phi", "must lie in [0, 1]")
    _require(v["evolution.init"] in ("uniform", "zero"), "evolution.init", "must be 'uniform' or 'zero'")
    lo, hi = v["ball.input_lo"], v["ball.input_hi"]
    _require((lo is None) == (hi is None), "ball.input_hi" if lo is not None else "ball.input_lo",
             "ball.input_lo and ball.input_hi must be given together")
    if lo is not None:
        _require(lo < hi, "ball.input_lo", "must be < ball.input_hi")
    _require(v["model.backbone_kind"] in BACKBONES, "model.backbone_kind", f"must be one of {BACKBONES}")
    _require(v["data.kind"] in ("two_moons", "blobs"), "data.kind", "must be 'two_moons' or 'blobs'")
    _require(v["data.noise_sd"] >= 0, "data.noise_sd", "must be non-negative")
    _require(v["data.k_shot"] >= 0, "data.k_shot", "must be >= 0")
    if v["data.k_shot"] > 0:
        _require(v["data.k_shot"] <= v["data.per_class"], "data.k_shot", "must not exceed data.per_class")
    if v["data.kind"] == "blobs":
        _require(v["data.dim"] >= max(v["data.num_classes"] - 1, 1), "data.dim",
                 "too small to place data.num_classes centers")
    _require(v["eval.steps"] >= 0, "eval.steps", "must be >= 0")
    if v["eval.step_size"] is not None:
        _require(v["eval.step_size"] > 0, "eval.step_size", "must be positive")


@dataclass
class RunConfig:
    values: dict
    train: TrainConfig = field(repr=False)

    @classmethod
    def from_values(cls, v: dict) -> "RunConfig":
        validate(v)
        train = TrainConfig(
            epochs=v["epochs"],
            batch_size=v["batch_size"],
            lr_init=v["lr_init"],
            momentum=v["momentum"],
            warmup_epochs=v["warmup_epochs"],
            attack=AttackConfig(v["attack.steps"], v["attack.step_size"], v["attack.random_start"]),
            evolution=EvolutionConfig(v["evolution.N"], v["evolution.phi"], v["evolution.iterations"],
                                      v["evolution.step_size"], v["evolution.init"]),
            ball=PerturbationBall(v["ball.epsilon"], v["ball.input_lo"], v["ball.input_hi"]),
            alpha_init=v["weights.alpha_init"],
            beta_init=v["weights.beta_init"],
            temperature=v["weights.temperature"],
            mode=v["mode"],
            seed=v["seed"],
            average_full_population=v["average_full_population"],
            kl_reversed=v["kl_reversed"],
            eval_steps=v["eval.steps"],
            eval_step_size=v["eval.step_size"],
        )
        return cls(dict(v), train)

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def with_seed(self, seed: int) -> "RunConfig":
        v = dict(self.values)
        v["seed"] = seed
        return RunConfig.from_values(v)

    def with_mode(self, mode: str) -> "RunConfig":
        v = dict(self.values)
        v["mode"] = mode
        return RunConfig.from_values(v)

    def model_spec(self, input_dim: int, num_classes: int) -> ModelInitSpec:
        v = self.values
        return ModelInitSpec(
            input_dim=input_dim,
            prompt_dim=v["model.prompt_dim"],
            feature_dim=v["model.feature_dim"],
            num_classes=num_classes,
            backbone_kind=v["model.backbone_kind"],
            init_seed=derive_seed(self.seed, "model"),
            init_scale=v["model.init_scale"],
            tau_logit=v["model.tau_logit"],
        )

    def data_stream(self) -> RandomStream:
        return RandomStream(self.seed).split("data")


def dumps_config(values: dict) -> str:
    lines = []
    for key, (kind, _) in SCHEMA.items():
        val = values[key]
        if val is None:
            text = "none"
        elif kind == "bool":
            text = "true" if val else "false"
        elif kind in ("real", "optreal"):
            text = f"{val:.17g}"
        else:
            text = str(val)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
