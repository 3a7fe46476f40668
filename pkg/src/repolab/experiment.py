"""The seeded synthetic task: sampler, gold reward, dataset, SFT init and runs.

Every random object is drawn from its own stream ``default_rng([seed, tag])``
so that changing one stage never perturbs another.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from .analysis import RunResult, win_rate
from .datagen import DatasetMeta, PreferenceTriple, make_dataset, random_gold
from .losses import LossConfig
from .policy import PolicyParams, Prompt, fit_sft, random_bigram
from .trainer import GammaSchedule, TrainConfig, train

GOLD_STREAM, SAMPLER_STREAM, DATA_STREAM, EVAL_STREAM = 11, 12, 13, 14


@dataclass(frozen=True)
class TaskSpec:
    seed: int
    vocab_size: int = 12
    class_count: int = 4
    max_len: int = 6
    n: int = 2000
    labeling: str = "bt_sample"
    end_token: Optional[int] = 0
    gold_scale: float = 1.0
    length_penalty: float = 0.0
    sampler_scale: float = 1.0


@dataclass
class Task:
    spec: TaskSpec
    meta: DatasetMeta
    sampler: PolicyParams
    dataset: List[PreferenceTriple]


def build_meta(spec: TaskSpec) -> DatasetMeta:
    gold = random_gold(spec.vocab_size, spec.class_count, np.random.default_rng([spec.seed, GOLD_STREAM]),
                       spec.gold_scale, spec.length_penalty)
    return DatasetMeta(spec.vocab_size, spec.class_count, spec.max_len, spec.seed, gold, spec.labeling,
                       spec.end_token)


def build_sampler(spec: TaskSpec) -> PolicyParams:
    return random_bigram(spec.vocab_size, spec.class_count, np.random.default_rng([spec.seed, SAMPLER_STREAM]),
                         spec.sampler_scale)


def build_task(spec: TaskSpec) -> Task:
    meta = build_meta(spec)
    sampler = build_sampler(spec)
    data = make_dataset(meta, spec.n, sampler, np.random.default_rng([spec.seed, DATA_STREAM]))
    return Task(spec, meta, sampler, data)


def sft_init(task: Task, epochs: int, lr: float) -> PolicyParams:
    return fit_sft(task.sampler, task.dataset, epochs, lr)


def eval_prompts(class_count: int, n_prompts: int) -> List[Prompt]:
    return [Prompt(i % class_count) for i in range(n_prompts)]


def evaluate(task: Task, policy: PolicyParams, baseline: PolicyParams, n_prompts: int,
             samples_per_prompt: int, seed: Optional[int] = None) -> float:
    seed = task.spec.seed if seed is None else seed
    report = win_rate(policy, baseline, eval_prompts(task.meta.class_count, n_prompts), task.meta.gold,
                      samples_per_prompt, seed * 1000 + EVAL_STREAM, task.meta.max_len, task.meta.end_token)
    return report.win_rate


def gamma_sweep(task: Task, base: TrainConfig, init: PolicyParams, gammas: Sequence[float],
                ref: Optional[PolicyParams] = None, n_prompts: int = 500, samples_per_prompt: int = 4,
                ) -> List[RunResult]:
    runs = []
    for i, g in enumerate(gammas):
        cfg = replace(base, loss=replace(base.loss, gamma=g), schedule=GammaSchedule.constant(g))
        final, stats = train(cfg, task.dataset, init, ref)
        wr = evaluate(task, final, init, n_prompts, samples_per_prompt)
        runs.append(RunResult(f"run{i:03d}", cfg, stats, wr))
    return runs


def default_train_config(gamma: float = 0.4, lr: float = 0.1, batch_size: int = 64, seed: int = 0,
                         kind: str = "RePO", **loss_kwargs) -> TrainConfig:
    return TrainConfig(LossConfig(kind, gamma, **loss_kwargs), lr=lr, epochs=1, batch_size=batch_size,
                       seed=seed, schedule=GammaSchedule.constant(gamma))
