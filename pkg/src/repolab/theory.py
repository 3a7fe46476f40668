"""Grid-based numerical certificates for the ReLU surrogate and a gradient oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError
from .losses import (KINKED_KINDS, NORMALIZED_KINDS, LossConfig, grad_weight, loss_margin, margin_inputs,
                     pair_gradient, pair_loss, sigmoid, softplus)
from .policy import PolicyParams, add_scaled, grad_seq_logprob, touched_mask, zeros_like

ENVELOPE_TOL = 1e-9
SIGMOID_TOL = 1e-6
GRADCHECK_TOL = 1e-6
# deviation of -min(margin); strictly negative bound means strictly positive margin
STRICT_POSITIVE_TOL = -math.ulp(0.0)


@dataclass
class PiecewiseLinearFn:
    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.float64)
        if self.xs.shape != self.ys.shape or self.xs.size < 2:
            raise InvalidInputError("need at least two breakpoints with matching x and y")
        if np.any(np.diff(self.xs) <= 0):
            raise InvalidInputError("breakpoint x must be strictly increasing")

    @property
    def breakpoints(self) -> List[Tuple[float, float]]:
        return list(zip(self.xs.tolist(), self.ys.tolist()))

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.ys) / np.diff(self.xs)

    def is_convex(self, tol: float = 1e-12) -> bool:
        return bool(np.all(np.diff(self.slopes) >= -tol))

    def __call__(self, x):
        return np.interp(x, self.xs, self.ys)


@dataclass
class TheoryReport:
    name: str
    max_deviation: float
    tolerance: float
    grid: str
    details: Dict[str, object] = field(default_factory=dict)
    extra_ok: bool = True

    @property
    def passed(self) -> bool:
        return bool(self.max_deviation <= self.tolerance) and self.extra_ok

    def to_record(self) -> dict:
        return {"name": self.name, "deviation": self.max_deviation, "tolerance": self.tolerance,
                "pass": self.passed, "grid": self.grid}


def zero_one_loss(x):
    x = np.asarray(x, dtype=np.float64)
    out = (x < 0).astype(np.float64)
    return out if out.ndim else float(out)


def relu_envelope(x, a: float):
    """The closed-form convex envelope ``ReLU(-x) / a`` on ``[-a, b]``."""
    return np.maximum(-np.asarray(x, dtype=np.float64), 0.0) / a


def _cross(o, p, q) -> float:
    return (p[0] - o[0]) * (q[1] - o[1]) - (p[1] - o[1]) * (q[0] - o[0])


def lower_convex_envelope(points: Sequence[Tuple[float, float]]) -> PiecewiseLinearFn:
    """Lower convex hull of ``points`` by Andrew's monotone chain; collinear points are dropped."""
    pts = sorted((float(x), float(y)) for x, y in points)
    if len(pts) < 2:
        raise InvalidInputError("need at least two points")
    for (x0, _), (x1, _) in zip(pts, pts[1:]):
        if x0 == x1:
            raise InvalidInputError(f"duplicate x value {x0}")
    hull: List[Tuple[float, float]] = []
    for p in pts:
        while len(hull) >= 2 and _cross(hull[-2], hull[-1], p) <= 0:
            hull.pop()
        hull.append(p)
    xs, ys = zip(*hull)
    return PiecewiseLinearFn(np.array(xs), np.array(ys))


def symmetric_grid(a: float, b: float, step: float, offset: float = 0.0) -> np.ndarray:
    """Points ``offset + k * step`` inside ``[-a, b]``; contains 0 when ``offset == 0``."""
    lo = math.ceil((-a - offset) / step - 1e-9)
    hi = math.floor((b - offset) / step + 1e-9)
    return offset + np.arange(lo, hi + 1) * step


def _check_domain(a, b, grid_step, resolution=10):
    if a <= 0 or b <= 0:
        raise InvalidInputError("domain [-a, b] needs a, b > 0")
    limit = min(a, b) / resolution
    if grid_step <= 0 or grid_step > limit * (1 + 1e-12):
        raise InvalidInputError(f"grid_step must lie in (0, {limit:g}]")


def envelope_check(a: float, b: float, grid_step: float = 1e-3, tolerance: float = ENVELOPE_TOL) -> TheoryReport:
    """Compare the brute-force hull of sampled 0-1 loss with ``ReLU(-x) / a``."""
    _check_domain(a, b, grid_step)
    xs = symmetric_grid(a, b, grid_step)
    hull = lower_convex_envelope(zip(xs, zero_one_loss(xs)))
    dev = float(np.max(np.abs(hull(xs) - relu_envelope(xs, a))))
    ok = hull.is_convex() and bool(np.all(hull(xs) <= zero_one_loss(xs) + 1e-15))
    return TheoryReport(f"envelope(a={a:g},b={b:g})", dev, tolerance,
                        f"[{-a:g}, {b:g}] step {grid_step:g} ({xs.size} points)",
                        {"breakpoints": hull.breakpoints, "hull": hull}, ok)


def argmin_set(values: np.ndarray, xs: np.ndarray) -> np.ndarray:
    return xs[values == values.min()]


def argmin_check(a: float, b: float, grid_step: float = 1e-3, offset: float = 0.0) -> TheoryReport:
    """Both grid argmin sets must equal the grid points in ``[0, b]``; deviation counts mismatches.

    Unlike the envelope check, ``grid_step`` may be as large as ``min(a, b)``,
    which admits the two-point case ``b == grid_step``.
    """
    _check_domain(a, b, grid_step, resolution=1)
    xs = symmetric_grid(a, b, grid_step, offset)
    expected = set(xs[xs >= 0].tolist())
    got_01 = set(argmin_set(zero_one_loss(xs), xs).tolist())
    got_relu = set(argmin_set(relu_envelope(xs, a), xs).tolist())
    mismatches = len(got_01 ^ expected) + len(got_relu ^ expected)
    return TheoryReport(f"argmin(a={a:g},b={b:g})", float(mismatches), 0.0,
                        f"[{-a:g}, {b:g}] step {grid_step:g} offset {offset:g}",
                        {"argmin_01": sorted(got_01), "argmin_relu": sorted(got_relu)})


def underestimation_check(xs: Sequence[float]) -> TheoryReport:
    """Logistic loss exceeds the 0-1 loss at every positive point, so it cannot underestimate it.

    The ReLU surrogate is checked alongside and must never exceed the 0-1 loss.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0 or np.any(xs <= 0):
        raise InvalidInputError("grid must be non-empty and strictly positive")
    excess = softplus(-xs) - zero_one_loss(xs)
    min_margin = float(excess.min())
    relu_ok = bool(np.all(relu_envelope(xs, 1.0) <= zero_one_loss(xs)))
    return TheoryReport("logistic_underestimation", -min_margin, STRICT_POSITIVE_TOL,
                        f"{xs.size} points in [{xs.min():g}, {xs.max():g}]",
                        {"min_violation_margin": min_margin}, relu_ok)


def sigmoid_limit_check(gamma: float, beta_list: Sequence[float], margin_grid: Sequence[float],
                        exclusion: float, tolerance: float = SIGMOID_TOL) -> TheoryReport:
    """Logistic weight ``sigmoid(beta (gamma - M))`` approaches ``1[M < gamma]`` as beta grows.

    Deviation is reported for the largest beta; the check also requires the
    per-beta deviations to decrease strictly (until they underflow to 0) and the weight at ``M == gamma`` to be 0.5.
    """
    if exclusion <= 0:
        raise InvalidInputError("exclusion must be > 0")
    betas = sorted(float(b) for b in beta_list)
    m = np.asarray(margin_grid, dtype=np.float64)
    m = m[np.abs(m - gamma) >= exclusion]
    if m.size == 0:
        raise InvalidInputError("no margins outside the exclusion band")
    indicator = (m < gamma).astype(np.float64)
    devs = [float(np.max(np.abs(sigmoid(b * (gamma - m)) - indicator))) for b in betas]
    monotone = all(d1 < d0 or d1 == d0 == 0.0 for d0, d1 in zip(devs, devs[1:]))
    at_kink = [grad_weight(LossConfig("SimPO", gamma, b), gamma) for b in betas]
    half = all(w == 0.5 for w in at_kink)
    return TheoryReport(f"sigmoid_limit(gamma={gamma:g})", devs[-1], tolerance,
                        f"{m.size} margins, |M-gamma| >= {exclusion:g}, beta in {betas}",
                        {"deviations": dict(zip(betas, devs)), "weight_at_gamma": at_kink, "monotone": monotone},
                        monotone and half)


@dataclass
class GradCheckResult:
    error: float
    boundary: bool
    n_coords: int


def _margin_gradient(policy, prompt, y_w, y_l, config):
    normalize = config.kind in NORMALIZED_KINDS
    g = zeros_like(policy)
    add_scaled(g, grad_seq_logprob(policy, prompt, y_w, normalize), 1.0)
    add_scaled(g, grad_seq_logprob(policy, prompt, y_l, normalize), -1.0)
    return g


def finite_diff_gradcheck(policy: PolicyParams, ref: Optional[PolicyParams], triple, config: LossConfig,
                          step: float = 1e-6) -> GradCheckResult:
    """Central differences of the pair loss against :func:`pair_gradient`.

    The error is ``max_i |analytic_i - numeric_i| / max(max|analytic|, max|numeric|)``
    over the coordinates the triple touches, falling back to the absolute error
    when that scale is below 1e-12.  Coordinates outside the touched set must
    have an exactly zero analytic gradient.  Triples whose margin lies within
    ``2 * step * max(1, max|grad u|)`` of a kink are skipped and flagged.
    """
    if not 1e-8 <= step <= 1e-4:
        raise InvalidInputError("step must lie in [1e-8, 1e-4]")
    prompt, y_w, y_l = triple.prompt, triple.y_w, triple.y_l
    if config.kind in KINKED_KINDS:
        u = loss_margin(config, margin_inputs(policy, prompt, y_w, y_l, ref))
        gu = _margin_gradient(policy, prompt, y_w, y_l, config)
        slope = max(1.0, max(float(np.abs(v).max()) for v in gu.values()))
        if abs(u - config.gamma) < 2.0 * step * slope:
            return GradCheckResult(float("nan"), True, 0)

    analytic = pair_gradient(policy, ref, prompt, y_w, y_l, config).gradient
    masks = touched_mask(policy, prompt, (y_w, y_l))
    work = policy.copy()
    a_vals, n_vals = [], []
    for name in policy.arrays:
        if np.any(analytic[name][~masks[name]] != 0.0):
            return GradCheckResult(float("inf"), False, 0)
        arr = work.arrays[name]
        for idx in zip(*np.nonzero(masks[name])):
            orig = arr[idx]
            hi, lo = orig + step, orig - step
            arr[idx] = hi
            f_hi = pair_loss(work, ref, prompt, y_w, y_l, config)
            arr[idx] = lo
            f_lo = pair_loss(work, ref, prompt, y_w, y_l, config)
            arr[idx] = orig
            a_vals.append(analytic[name][idx])
            n_vals.append((f_hi - f_lo) / (hi - lo))
    a_vals, n_vals = np.array(a_vals), np.array(n_vals)
    scale = max(float(np.abs(a_vals).max(initial=0.0)), float(np.abs(n_vals).max(initial=0.0)))
    err = float(np.abs(a_vals - n_vals).max(initial=0.0))
    if scale >= 1e-12:
        err /= scale
    return GradCheckResult(err, False, a_vals.size)


def random_gradcheck_case(rng: np.random.Generator, kind: str, model_kind: Optional[str] = None):
    """A random small ``(policy, ref, triple, config)`` instance for the gradient oracle."""
    from .datagen import PreferenceTriple
    from .losses import REFERENCE_KINDS
    from .policy import Prompt, random_bigram, random_mlp

    V = int(rng.integers(3, 7))
    C = int(rng.integers(1, 4))
    model_kind = model_kind or ("bigram" if rng.random() < 0.5 else "mlp")
    if model_kind == "bigram":
        policy = random_bigram(V, C, rng)
    else:
        policy = random_mlp(V, C, int(rng.integers(2, 6)), rng)
    ref = random_bigram(V, C, rng) if kind in REFERENCE_KINDS else None
    prompt = Prompt(int(rng.integers(C)))
    y_w = tuple(int(t) for t in rng.integers(0, V, size=int(rng.integers(1, 6))))
    y_l = tuple(int(t) for t in rng.integers(0, V, size=int(rng.integers(1, 6))))
    config = LossConfig(kind, gamma=float(rng.uniform(0.0, 1.0)), beta=float(rng.choice([0.5, 2.0, 10.0])),
                        lam=float(rng.uniform(0.0, 1.0)), tau=float(rng.choice([0.1, 0.5, 1.0])),
                        alpha=float(rng.uniform(0.0, 1.0)))
    return policy, ref, PreferenceTriple(prompt, y_w, y_l), config


def gradcheck_battery(kinds: Sequence[str], cases: int, seed: int = 0, step: float = 1e-6,
                      tolerance: float = GRADCHECK_TOL) -> List[TheoryReport]:
    """``cases`` non-boundary random instances per loss kind; one report per kind."""
    reports = []
    for j, kind in enumerate(kinds):
        rng = np.random.default_rng([seed, j])
        errors, skipped = [], 0
        while len(errors) < cases:
            res = finite_diff_gradcheck(*random_gradcheck_case(rng, kind), step=step)
            if res.boundary:
                skipped += 1
                continue
            errors.append(res.error)
        reports.append(TheoryReport(f"gradcheck({kind})", float(max(errors)), tolerance,
                                    f"{cases} random cases, step {step:g}",
                                    {"boundary_skipped": skipped, "errors": errors}))
    return reports
