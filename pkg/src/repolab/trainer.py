"""Preference-optimization training loop with Adam and margin diagnostics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError, ParseError
from .losses import LossConfig, implicit_margin, margin_inputs, pair_gradient
from .policy import PolicyParams, add_scaled, zeros_like

SHUFFLE_STREAM = 0x5EED


@dataclass(frozen=True)
class GammaSchedule:
    mode: str = "constant"
    gamma_start: float = 0.5
    gamma_end: float = 0.5

    def __post_init__(self):
        if self.mode not in ("constant", "linear"):
            raise InvalidInputError(f"unknown schedule mode {self.mode!r}")
        for g in (self.gamma_start, self.gamma_end):
            # [0, 1] is enforced per loss kind by LossConfig
            if not (np.isfinite(g) and g >= 0.0):
                raise InvalidInputError(f"gamma values must be finite and >= 0, got {g}")
        if self.mode == "constant" and self.gamma_start != self.gamma_end:
            raise InvalidInputError("constant schedule needs gamma_start == gamma_end")

    @classmethod
    def constant(cls, gamma: float) -> "GammaSchedule":
        return cls("constant", gamma, gamma)

    @classmethod
    def linear(cls, start: float, end: float) -> "GammaSchedule":
        return cls("linear", start, end)


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig
    lr: float
    epochs: int = 1
    batch_size: int = 64
    seed: int = 0
    schedule: Optional[GammaSchedule] = None
    warmup_frac: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 0

    def __post_init__(self):
        # lr == 0 is accepted as a frozen-parameter control run
        if not self.lr >= 0:
            raise InvalidInputError("lr must be >= 0")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be >= 0")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise InvalidInputError("warmup_frac must lie in [0, 1)")

    @property
    def gamma_schedule(self) -> GammaSchedule:
        if self.schedule is not None:
            return self.schedule
        return GammaSchedule.constant(self.loss.gamma)


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: PolicyParams, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(zeros_like(params), zeros_like(params), 0, beta1, beta2, eps)


@dataclass
class BatchStats:
    step: int
    mean_loss: float
    m_batch: float
    filter_frac: float
    gamma: float
    lr: float
    m_dataset: Optional[float] = None

    def to_record(self) -> dict:
        rec = asdict(self)
        if rec["m_dataset"] is None:
            del rec["m_dataset"]
        return rec


def gamma_at(schedule: GammaSchedule, progress: float) -> float:
    if not 0.0 <= progress <= 1.0:
        raise InvalidInputError(f"progress must lie in [0, 1], got {progress}")
    if schedule.mode == "constant":
        return schedule.gamma_start
    # convex-combination form is exact at both endpoints
    return (1.0 - progress) * schedule.gamma_start + progress * schedule.gamma_end


def adam_step(params: PolicyParams, grad, state: AdamState, lr: float) -> Tuple[PolicyParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    if set(grad) != set(params.arrays):
        raise InvalidInputError("gradient arrays do not match parameters")
    for k, g in grad.items():
        if g.shape != params.arrays[k].shape:
            raise InvalidInputError(f"gradient {k!r} has shape {g.shape}, expected {params.arrays[k].shape}")
    b1, b2, eps = state.beta1, state.beta2, state.eps
    t = state.step + 1
    new_m, new_v, new_arrays = {}, {}, {}
    for k, g in grad.items():
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_arrays[k] = params.arrays[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return params.with_arrays(new_arrays), AdamState(new_m, new_v, t, b1, b2, eps)


def lr_at(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, cosine decay to 0 after."""
    warmup = int(math.floor(warmup_frac * total_steps))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    decay = total_steps - warmup
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / decay))


def filter_fraction(margins: Sequence[float], gamma: float) -> float:
    """Share of margins at or above ``gamma`` (the pairs that receive no RePO gradient)."""
    if len(margins) == 0:
        raise InvalidInputError("empty margin list")
    return float(np.mean(np.asarray(margins, dtype=np.float64) >= gamma))


def dataset_margins(policy: PolicyParams, dataset) -> np.ndarray:
    return np.array([implicit_margin(margin_inputs(policy, t.prompt, t.y_w, t.y_l)) for t in dataset])


def dataset_margin(policy: PolicyParams, dataset) -> float:
    """Mean implicit reward margin over every triple."""
    if not dataset:
        raise InvalidInputError("empty dataset")
    return float(dataset_margins(policy, dataset).mean())


def train(config: TrainConfig, dataset, init: PolicyParams,
          ref: Optional[PolicyParams] = None) -> Tuple[PolicyParams, List[BatchStats]]:
    """Minimize the configured loss over ``dataset``; returns final params and per-step stats.

    The last step of every epoch, and every ``eval_every``-th step when that is
    positive, also carries ``m_dataset`` evaluated with the post-update parameters.
    """
    if not dataset:
        raise InvalidInputError("empty dataset")
    loss_cfg = config.loss
    if loss_cfg.needs_reference and ref is None:
        raise InvalidInputError(f"{loss_cfg.kind} requires a reference policy")
    if not loss_cfg.needs_reference and ref is not None:
        raise InvalidInputError(f"{loss_cfg.kind} is reference-free; got a reference policy")
    schedule = config.gamma_schedule

    n = len(dataset)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    shuffle_rng = np.random.default_rng([config.seed, SHUFFLE_STREAM])
    params = init.copy()
    state = AdamState.zeros(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    stats: List[BatchStats] = []
    step = 0
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for b in range(steps_per_epoch):
            batch = [dataset[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
            progress = step / (total - 1) if total > 1 else 0.0
            gamma = gamma_at(schedule, progress)
            step_cfg = LossConfig(loss_cfg.kind, gamma, loss_cfg.beta, loss_cfg.lam, loss_cfg.tau, loss_cfg.alpha)
            lr = lr_at(step, total, config.lr, config.warmup_frac)

            acc = zeros_like(params)
            losses, margins = [], []
            for t in batch:
                rep = pair_gradient(params, ref, t.prompt, t.y_w, t.y_l, step_cfg)
                add_scaled(acc, rep.gradient, 1.0 / len(batch))
                losses.append(rep.loss)
                margins.append(rep.implicit_margin)
            stats.append(BatchStats(step, float(np.mean(losses)), float(np.mean(margins)),
                                    filter_fraction(margins, gamma), gamma, lr))
            params, state = adam_step(params, acc, state, lr)
            params.check_finite()
            step += 1
            if config.eval_every and step % config.eval_every == 0:
                stats[-1].m_dataset = dataset_margin(params, dataset)
        stats[-1].m_dataset = dataset_margin(params, dataset)
    return params, stats


def write_metrics(path, stats: Sequence[BatchStats]):
    """Line-delimited JSON, one record per step."""
    with open(path, "w") as fh:
        for s in stats:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")


def read_metrics(path) -> List[BatchStats]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(BatchStats(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ParseError(f"malformed metrics record: {exc}", lineno) from exc
    return out
