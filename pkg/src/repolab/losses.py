"""Pairwise preference losses, their gradient weights and per-pair gradients.

Every loss is written as a function of one scalar *loss margin* ``u``:

======================  =====================================================
kind                    ``u``
======================  =====================================================
RePO, RePOpp, SimPO     ``M = avg_w - avg_l`` (length-normalized log-probs)
DPO, IPO, RePOpp_on_DPO ``(sum_w - sum_l) - (ref_sum_w - ref_sum_l)``
SLiC, CPO               ``sum_w - sum_l``
RDPO                    DPO margin minus ``alpha * (len_w - len_l) / beta``
======================  =====================================================

and its gradient is ``-scale * weight * grad(u)`` plus the ``-lambda * grad(sum_w)``
regularizer for SLiC and CPO; ``scale`` is ``beta`` for the logistic kinds and
1 otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError
from .policy import Gradient, PolicyParams, Prompt, add_scaled, grad_seq_logprob, seq_logprob, zeros_like

KINDS = ("RePO", "RePOpp", "SimPO", "DPO", "SLiC", "IPO", "CPO", "RDPO", "RePOpp_on_DPO")
REFERENCE_KINDS = frozenset({"DPO", "IPO", "RDPO", "RePOpp_on_DPO"})
NORMALIZED_KINDS = frozenset({"RePO", "RePOpp", "SimPO"})
UNNORMALIZED_KINDS = frozenset({"SLiC", "CPO"})
LOGISTIC_KINDS = frozenset({"SimPO", "RePOpp", "DPO", "CPO", "RDPO", "RePOpp_on_DPO"})
HINGE_KINDS = frozenset({"RePO", "SLiC"})
REGULARIZED_KINDS = frozenset({"SLiC", "CPO"})
# kinds whose loss has a kink at u == gamma
KINKED_KINDS = frozenset({"RePO", "RePOpp", "SLiC", "RePOpp_on_DPO"})


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def softplus(z):
    """``log(1 + exp(z))`` without overflow; equals ``-log sigmoid(-z)``."""
    z = np.asarray(z, dtype=np.float64)
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return out if out.ndim else float(out)


def requires_reference(kind: str) -> bool:
    return kind in REFERENCE_KINDS


@dataclass(frozen=True)
class LossConfig:
    kind: str
    gamma: float = 0.0
    beta: float = 1.0
    lam: float = 0.0
    tau: float = 1.0
    alpha: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        for name in ("gamma", "beta", "lam", "tau", "alpha"):
            if not np.isfinite(getattr(self, name)):
                raise InvalidInputError(f"{name} must be finite")
        if self.kind in ("RePO", "RePOpp") and not 0.0 <= self.gamma <= 1.0:
            raise InvalidInputError(f"gamma must lie in [0, 1] for {self.kind}, got {self.gamma}")
        if self.kind in LOGISTIC_KINDS and self.beta <= 0:
            raise InvalidInputError(f"beta must be > 0 for {self.kind}")
        if self.kind == "IPO" and self.tau <= 0:
            raise InvalidInputError("tau must be > 0 for IPO")

    @property
    def needs_reference(self) -> bool:
        return self.kind in REFERENCE_KINDS

    @property
    def threshold(self) -> float:
        """The margin target ``gamma`` actually used by this kind (0 where ignored)."""
        if self.kind in ("DPO", "CPO", "RDPO", "IPO"):
            return 0.0
        return self.gamma

    @property
    def gradient_scale(self) -> float:
        return self.beta if self.kind in LOGISTIC_KINDS else 1.0


@dataclass(frozen=True)
class MarginInputs:
    avg_w: float
    avg_l: float
    sum_w: float
    sum_l: float
    len_w: int
    len_l: int
    ref_sum_w: Optional[float] = None
    ref_sum_l: Optional[float] = None

    @property
    def has_reference(self) -> bool:
        return self.ref_sum_w is not None and self.ref_sum_l is not None

    def swapped(self) -> "MarginInputs":
        return MarginInputs(self.avg_l, self.avg_w, self.sum_l, self.sum_w, self.len_l, self.len_w,
                            self.ref_sum_l, self.ref_sum_w)


@dataclass
class PairGradientReport:
    loss: float
    weight: float
    filtered: bool
    margin: float
    implicit_margin: float
    gradient: Gradient


def implicit_margin(inputs: MarginInputs) -> float:
    """Reference-free length-normalized margin ``avg_w - avg_l``."""
    return inputs.avg_w - inputs.avg_l


def dpo_margin(inputs: MarginInputs) -> float:
    if not inputs.has_reference:
        raise InvalidInputError("reference log-probabilities are required for the DPO margin")
    return (inputs.sum_w - inputs.sum_l) - (inputs.ref_sum_w - inputs.ref_sum_l)


def loss_margin(config: LossConfig, inputs: MarginInputs) -> float:
    """The scalar ``u`` each loss is a function of (see module docstring)."""
    kind = config.kind
    if kind in REFERENCE_KINDS and not inputs.has_reference:
        raise InvalidInputError(f"{kind} requires reference log-probabilities")
    if kind in NORMALIZED_KINDS:
        return implicit_margin(inputs)
    if kind in UNNORMALIZED_KINDS:
        return inputs.sum_w - inputs.sum_l
    u = dpo_margin(inputs)
    if kind == "RDPO":
        u -= config.alpha * (inputs.len_w - inputs.len_l) / config.beta
    return u


def _loss_from_margin(config: LossConfig, u: float, sum_w: float) -> float:
    kind, gamma, beta = config.kind, config.gamma, config.beta
    if kind == "RePO":
        return max(gamma - u, 0.0)
    if kind == "SLiC":
        return max(gamma - u, 0.0) - config.lam * sum_w
    if kind in ("RePOpp", "RePOpp_on_DPO"):
        return softplus(max(beta * (gamma - u), 0.0))
    if kind == "SimPO":
        return softplus(beta * (gamma - u))
    if kind in ("DPO", "RDPO"):
        return softplus(-beta * u)
    if kind == "CPO":
        return softplus(-beta * u) - config.lam * sum_w
    if kind == "IPO":
        return (u - 1.0 / (2.0 * config.tau)) ** 2
    raise InvalidInputError(f"unknown loss kind {kind!r}")


def loss_value(config: LossConfig, inputs: MarginInputs) -> float:
    return float(_loss_from_margin(config, loss_margin(config, inputs), inputs.sum_w))


def grad_weight(config: LossConfig, margin: float) -> float:
    """Scalar weight multiplying ``grad(u)`` in the pair gradient.

    Hinge kinds give ``1[u < gamma]``; logistic kinds ``sigmoid(beta (gamma - u))``,
    times ``1[u < gamma]`` for the RePO++ kinds.  IPO has no bounded weight and
    returns ``-dL/du = 2 (1/(2 tau) - u)``.
    """
    if not np.isfinite(margin):
        raise InvalidInputError("margin must be finite")
    kind = config.kind
    gamma = config.threshold
    if kind in HINGE_KINDS:
        return 1.0 if margin < gamma else 0.0
    if kind == "IPO":
        return 2.0 * (1.0 / (2.0 * config.tau) - margin)
    s = sigmoid(config.beta * (gamma - margin))
    if kind in ("RePOpp", "RePOpp_on_DPO"):
        return s if margin < gamma else 0.0
    return s


def margin_inputs(policy: PolicyParams, prompt: Prompt, y_w: Sequence[int], y_l: Sequence[int],
                  ref: Optional[PolicyParams] = None) -> MarginInputs:
    sum_w = seq_logprob(policy, prompt, y_w)
    sum_l = seq_logprob(policy, prompt, y_l)
    ref_w = ref_l = None
    if ref is not None:
        ref_w = seq_logprob(ref, prompt, y_w)
        ref_l = seq_logprob(ref, prompt, y_l)
    return MarginInputs(sum_w / len(y_w), sum_l / len(y_l), sum_w, sum_l, len(y_w), len(y_l), ref_w, ref_l)


def _check_reference(config: LossConfig, ref: Optional[PolicyParams]):
    if config.needs_reference and ref is None:
        raise InvalidInputError(f"{config.kind} requires a reference policy")
    if not config.needs_reference and ref is not None:
        raise InvalidInputError(f"{config.kind} is reference-free; got a reference policy")


def pair_loss(policy: PolicyParams, ref: Optional[PolicyParams], prompt: Prompt, y_w: Sequence[int],
              y_l: Sequence[int], config: LossConfig) -> float:
    _check_reference(config, ref)
    return loss_value(config, margin_inputs(policy, prompt, y_w, y_l, ref))


def pair_gradient(policy: PolicyParams, ref: Optional[PolicyParams], prompt: Prompt, y_w: Sequence[int],
                  y_l: Sequence[int], config: LossConfig) -> PairGradientReport:
    """Loss, weight and exact parameter gradient for one preference pair."""
    _check_reference(config, ref)
    inputs = margin_inputs(policy, prompt, y_w, y_l, ref)
    u = loss_margin(config, inputs)
    loss = float(_loss_from_margin(config, u, inputs.sum_w))
    weight = grad_weight(config, u)
    normalize = config.kind in NORMALIZED_KINDS
    regularized = config.kind in REGULARIZED_KINDS and config.lam != 0.0

    grad = zeros_like(policy)
    coef = -config.gradient_scale * weight
    if coef != 0.0:
        add_scaled(grad, grad_seq_logprob(policy, prompt, y_w, normalize), coef)
        add_scaled(grad, grad_seq_logprob(policy, prompt, y_l, normalize), -coef)
    if regularized:
        add_scaled(grad, grad_seq_logprob(policy, prompt, y_w), -config.lam)
    filtered = weight == 0.0 and not regularized
    return PairGradientReport(loss, float(weight), filtered, float(u), implicit_margin(inputs), grad)
