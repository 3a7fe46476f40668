"""Over-optimization scaling fits, gold-reward win rates and run summaries."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .datagen import GoldRewardSpec, gold_reward
from .errors import DegenerateFitError, InvalidInputError
from .policy import PolicyParams, Prompt, sample
from .trainer import BatchStats, TrainConfig, write_metrics

SUMMARY_COLUMNS = ("run_id", "loss", "schedule", "gamma_start", "gamma_end", "final_m_dataset",
                   "final_filter_frac", "d", "win_rate")
D_TAIL_FRAC = 0.2


@dataclass(frozen=True)
class ScalingFit:
    alpha: float
    beta: float
    rss: float
    n_points: int


@dataclass(frozen=True)
class WinRateReport:
    wins: int
    ties: int
    total: int

    @property
    def win_rate(self) -> float:
        return (self.wins + 0.5 * self.ties) / self.total


def fit_scaling_law(points: Sequence[Tuple[float, float]]) -> ScalingFit:
    """Least-squares fit of ``R(d) = d (alpha - beta log d)``.

    The model is linear in ``(log d, R / d)``: intercept ``alpha``, slope ``-beta``.
    Rows are weighted by ``d`` (weights ``d**2``) so the least-squares objective is
    the residual in ``R`` itself; the unweighted transformed fit would inflate
    additive noise on small-``d`` points by ``1 / d``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise InvalidInputError("need at least two (d, R) points")
    d, r = pts[:, 0], pts[:, 1]
    if np.any(d <= 0) or not np.isfinite(pts).all():
        raise InvalidInputError("every d must be finite and > 0")
    x = np.log(d)
    if np.ptp(x) == 0.0:
        raise DegenerateFitError("all d values are equal; the scaling law is unidentifiable")
    design = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(design * d[:, None], r, rcond=None)
    alpha, beta = float(coef[0]), float(-coef[1])
    resid = r - d * (alpha - beta * x)
    return ScalingFit(alpha, beta, float(resid @ resid), int(d.size))


def predict_R(fit: ScalingFit, d: float) -> float:
    if not d > 0:
        raise InvalidInputError("d must be > 0")
    return float(d * (fit.alpha - fit.beta * np.log(d)))


def peak_margin(fit: ScalingFit) -> float:
    """Maximizer ``exp(alpha / beta - 1)`` of the fitted law (requires beta > 0)."""
    if fit.beta <= 0:
        raise InvalidInputError("the fitted law has no interior maximum unless beta > 0")
    return float(np.exp(fit.alpha / fit.beta - 1.0))


def win_rate(policy_a: PolicyParams, policy_b: PolicyParams, prompts: Sequence[Prompt], gold: GoldRewardSpec,
             samples_per_prompt: int, seed: int, max_len: int, end_token: Optional[int] = None,
             swap_streams: bool = False) -> WinRateReport:
    """Head-to-head gold-reward comparison of samples from two policies.

    Each side draws from its own stream, derived per prompt from ``seed``;
    ``swap_streams`` exchanges the two sides' streams so that
    ``win_rate(a, b, s) + win_rate(b, a, s, swap_streams=True) == 1``.
    """
    if not prompts:
        raise InvalidInputError("no prompts")
    if samples_per_prompt < 1:
        raise InvalidInputError("samples_per_prompt must be >= 1")
    side_a, side_b = (1, 0) if swap_streams else (0, 1)
    wins = ties = 0
    for i, prompt in enumerate(prompts):
        rng_a = np.random.default_rng([seed, side_a, i])
        rng_b = np.random.default_rng([seed, side_b, i])
        for _ in range(samples_per_prompt):
            r_a = gold_reward(gold, prompt, sample(policy_a, prompt, max_len, rng_a, end_token))
            r_b = gold_reward(gold, prompt, sample(policy_b, prompt, max_len, rng_b, end_token))
            if r_a > r_b:
                wins += 1
            elif r_a == r_b:
                ties += 1
    return WinRateReport(wins, ties, len(prompts) * samples_per_prompt)


def margin_proxy(stats: Sequence[BatchStats], tail_frac: float = D_TAIL_FRAC) -> float:
    """Mean ``m_batch`` over the final ``tail_frac`` of steps (at least one step)."""
    if not stats:
        raise InvalidInputError("no training steps")
    k = max(1, int(round(tail_frac * len(stats))))
    return float(np.mean([s.m_batch for s in stats[-k:]]))


@dataclass
class RunResult:
    run_id: str
    config: TrainConfig
    stats: List[BatchStats]
    win_rate: float


def _final_m_dataset(stats):
    for s in reversed(stats):
        if s.m_dataset is not None:
            return s.m_dataset
    return float("nan")


def series_filename(run: RunResult) -> str:
    sched = run.config.gamma_schedule
    return f"series_{run.run_id}_gamma{sched.gamma_start:.3f}-{sched.gamma_end:.3f}.jsonl"


def summary_rows(runs: Sequence[RunResult]) -> List[dict]:
    rows = []
    for run in runs:
        sched = run.config.gamma_schedule
        rows.append({
            "run_id": run.run_id,
            "loss": run.config.loss.kind,
            "schedule": sched.mode,
            "gamma_start": sched.gamma_start,
            "gamma_end": sched.gamma_end,
            "final_m_dataset": _final_m_dataset(run.stats),
            "final_filter_frac": run.stats[-1].filter_frac,
            "d": margin_proxy(run.stats),
            "win_rate": run.win_rate,
        })
    rows.sort(key=lambda r: (r["gamma_start"], r["gamma_end"], r["run_id"]))
    return rows


def emit_summary(runs: Sequence[RunResult], out_dir) -> Tuple[Path, List[Path]]:
    """Write ``summary.csv`` (one row per run, ordered by gamma) and one series file per run."""
    if not runs:
        raise InvalidInputError("no runs to summarize")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in summary_rows(runs):
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    summary = out / "summary.csv"
    summary.write_text(buf.getvalue())
    series = []
    for run in sorted(runs, key=lambda r: r.run_id):
        path = out / series_filename(run)
        write_metrics(path, run.stats)
        series.append(path)
    return summary, series


def read_summary(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("gamma_start", "gamma_end", "final_m_dataset", "final_filter_frac", "d", "win_rate"):
            row[key] = float(row[key])
    return rows
