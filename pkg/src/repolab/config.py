"""Flat ``section.key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment.  A ``[section]`` header
prefixes the keys that follow it, so ``[train]`` + ``lr = 0.1`` is the same as
``train.lr = 0.1``.  Every key can be overridden on the command line with a
flag of the same name (``--train.lr 0.1`` or ``--train.lr=0.1``).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

from .errors import ConfigError
from .experiment import TaskSpec
from .losses import LossConfig
from .trainer import GammaSchedule, TrainConfig


class MissingSeedError(ConfigError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("", "none") else int(text)


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "none") else float(text)


def _opt_str(text: str) -> Optional[str]:
    return None if text.strip().lower() in ("", "none") else text.strip()


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


# key -> (parser, default)
SCHEMA: Dict[str, Tuple[Callable[[str], Any], Any]] = {
    "seed": (_opt_int, None),
    "data.vocab_size": (int, 12),
    "data.class_count": (int, 4),
    "data.max_len": (int, 6),
    "data.n": (int, 2000),
    "data.labeling": (str, "bt_sample"),
    "data.end_token": (_opt_int, 0),
    "data.gold_scale": (float, 1.0),
    "data.length_penalty": (float, 0.0),
    "data.sampler_scale": (float, 1.0),
    "loss.kind": (str, "RePO"),
    "loss.gamma": (float, 0.4),
    "loss.beta": (float, 10.0),
    "loss.lambda": (float, 0.0),
    "loss.tau": (float, 0.5),
    "loss.alpha": (float, 0.0),
    "train.lr": (float, 0.1),
    "train.epochs": (int, 1),
    "train.batch_size": (int, 64),
    "train.warmup_frac": (float, 0.1),
    "train.adam_beta1": (float, 0.9),
    "train.adam_beta2": (float, 0.999),
    "train.adam_eps": (float, 1e-8),
    "train.eval_every": (int, 0),
    "train.schedule": (str, "constant"),
    "train.gamma_start": (_opt_float, None),
    "train.gamma_end": (_opt_float, None),
    "sft.enabled": (_bool, False),
    "sft.epochs": (int, 100),
    "sft.lr": (float, 1.0),
    "eval.prompts": (int, 500),
    "eval.samples_per_prompt": (int, 4),
    "sweep.gammas": (_floats, (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)),
    "io.data": (_opt_str, None),
    "io.init_params": (_opt_str, None),
    "io.ref_params": (_opt_str, None),
    "io.policy_a": (_opt_str, None),
    "io.policy_b": (_opt_str, None),
}


def parse_text(text: str, source: str = "<config>") -> Dict[str, str]:
    raw: Dict[str, str] = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if section:
            key = f"{section}.{key}"
        raw[key] = value
    return raw


def parse_overrides(args: Iterable[str]) -> Dict[str, str]:
    """Turn leftover ``--section.key value`` / ``--section.key=value`` tokens into a dict."""
    out: Dict[str, str] = {}
    args = list(args)
    i = 0
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"flag --{key} needs a value")
            value = args[i + 1]
            i += 1
        out[key] = value
        i += 1
    return out


@dataclass
class RunConfig:
    values: Dict[str, Any]

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @classmethod
    def build(cls, file_text: Optional[str] = None, overrides: Optional[Dict[str, str]] = None,
              source: str = "<config>") -> "RunConfig":
        raw = parse_text(file_text, source) if file_text else {}
        raw.update(overrides or {})
        unknown = sorted(set(raw) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        values = {}
        for key, (parser, default) in SCHEMA.items():
            if key in raw:
                try:
                    values[key] = parser(raw[key])
                except ValueError as exc:
                    raise ConfigError(f"invalid value for {key}: {exc}") from exc
            else:
                values[key] = default
        return cls(values)

    @classmethod
    def load(cls, path: Optional[str], overrides: Optional[Dict[str, str]] = None) -> "RunConfig":
        text = None
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.build(text, overrides, str(path))

    def require_seed(self) -> int:
        if self.values["seed"] is None:
            raise MissingSeedError("a seed is mandatory (set 'seed' in the config or pass --seed)")
        return self.values["seed"]

    def task_spec(self) -> TaskSpec:
        v = self.values
        return TaskSpec(seed=self.require_seed(), vocab_size=v["data.vocab_size"], class_count=v["data.class_count"],
                        max_len=v["data.max_len"], n=v["data.n"], labeling=v["data.labeling"],
                        end_token=v["data.end_token"], gold_scale=v["data.gold_scale"],
                        length_penalty=v["data.length_penalty"], sampler_scale=v["data.sampler_scale"])

    def loss_config(self) -> LossConfig:
        v = self.values
        return LossConfig(v["loss.kind"], v["loss.gamma"], v["loss.beta"], v["loss.lambda"], v["loss.tau"],
                          v["loss.alpha"])

    def schedule(self) -> GammaSchedule:
        v = self.values
        start = v["train.gamma_start"] if v["train.gamma_start"] is not None else v["loss.gamma"]
        end = v["train.gamma_end"] if v["train.gamma_end"] is not None else start
        if v["train.schedule"] == "constant":
            return GammaSchedule("constant", start, start if v["train.gamma_end"] is None else end)
        return GammaSchedule(v["train.schedule"], start, end)

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(self.loss_config(), lr=v["train.lr"], epochs=v["train.epochs"],
                           batch_size=v["train.batch_size"], seed=self.require_seed(), schedule=self.schedule(),
                           warmup_frac=v["train.warmup_frac"], adam_beta1=v["train.adam_beta1"],
                           adam_beta2=v["train.adam_beta2"], adam_eps=v["train.adam_eps"],
                           eval_every=v["train.eval_every"])

    def dump(self) -> str:
        lines: List[str] = []
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, tuple):
                val = ",".join(repr(x) for x in val)
            lines.append(f"{key} = {'none' if val is None else val}")
        return "\n".join(lines) + "\n"
