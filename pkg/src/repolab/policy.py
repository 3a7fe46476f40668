"""Tiny conditional softmax sequence policies with exact log-prob gradients.

Two model kinds share one interface:

* ``bigram``: a logits table ``logits[c, prev, v]`` of shape ``C x (V+1) x V``.
  Row ``prev == V`` is the begin-of-sequence marker used for ``t = 0``.
* ``mlp``: one-hot ``(class, prev)`` -> tanh hidden layer of width ``H`` -> ``V``
  logits.  Parameters ``W1 (H, C+V+1)``, ``b1 (H,)``, ``W2 (V, H)``, ``b2 (V,)``.

A response length ``|y|`` counts every emitted token, including an end token
when one was sampled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError, NumericError

Gradient = Dict[str, np.ndarray]
TokenSeq = Tuple[int, ...]

MODEL_KINDS = ("bigram", "mlp")


@dataclass(frozen=True)
class Prompt:
    class_id: int
    tokens: Optional[TokenSeq] = None


@dataclass
class PolicyParams:
    kind: str
    vocab_size: int
    class_count: int
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise InvalidInputError(f"unknown model kind {self.kind!r}")
        V, C = self.vocab_size, self.class_count
        if V < 1 or C < 1:
            raise InvalidInputError("vocab_size and class_count must be positive")
        self.arrays = {k: np.asarray(a, dtype=np.float64) for k, a in self.arrays.items()}
        for name, shape in self.expected_shapes().items():
            if name not in self.arrays or self.arrays[name].shape != shape:
                got = self.arrays.get(name)
                got = None if got is None else got.shape
                raise InvalidInputError(f"{self.kind} array {name!r}: expected shape {shape}, got {got}")
        if set(self.arrays) != set(self.expected_shapes()):
            raise InvalidInputError(f"unexpected arrays {sorted(set(self.arrays) - set(self.expected_shapes()))}")

    @property
    def hidden(self) -> Optional[int]:
        if self.kind == "mlp":
            return self.arrays["b1"].shape[0] if "b1" in self.arrays else None
        return None

    @property
    def bos(self) -> int:
        return self.vocab_size

    def expected_shapes(self) -> Dict[str, tuple]:
        V, C = self.vocab_size, self.class_count
        if self.kind == "bigram":
            return {"logits": (C, V + 1, V)}
        H = self.arrays["b1"].shape[0] if "b1" in self.arrays else 0
        return {"W1": (H, C + V + 1), "b1": (H,), "W2": (V, H), "b2": (V,)}

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.kind, self.vocab_size, self.class_count,
                            {k: a.copy() for k, a in self.arrays.items()})

    def with_arrays(self, arrays: Dict[str, np.ndarray]) -> "PolicyParams":
        return PolicyParams(self.kind, self.vocab_size, self.class_count, arrays)

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays.values())

    def check_finite(self):
        if not self.is_finite():
            raise NumericError("policy parameters contain non-finite values")

    def equal(self, other: "PolicyParams") -> bool:
        """Bit-for-bit equality of kind, sizes and every array."""
        if (self.kind, self.vocab_size, self.class_count) != (other.kind, other.vocab_size, other.class_count):
            return False
        if set(self.arrays) != set(other.arrays):
            return False
        return all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)


def uniform_bigram(vocab_size: int, class_count: int) -> PolicyParams:
    return PolicyParams("bigram", vocab_size, class_count,
                        {"logits": np.zeros((class_count, vocab_size + 1, vocab_size))})


def random_bigram(vocab_size: int, class_count: int, rng: np.random.Generator, scale: float = 1.0) -> PolicyParams:
    logits = scale * rng.standard_normal((class_count, vocab_size + 1, vocab_size))
    return PolicyParams("bigram", vocab_size, class_count, {"logits": logits})


def random_mlp(vocab_size: int, class_count: int, hidden: int, rng: np.random.Generator,
               scale: float = 1.0) -> PolicyParams:
    d_in = class_count + vocab_size + 1
    arrays = {
        "W1": scale * rng.standard_normal((hidden, d_in)),
        "b1": scale * 0.1 * rng.standard_normal(hidden),
        "W2": scale * rng.standard_normal((vocab_size, hidden)) / np.sqrt(hidden),
        "b2": scale * 0.1 * rng.standard_normal(vocab_size),
    }
    return PolicyParams("mlp", vocab_size, class_count, arrays)


def zeros_like(policy: PolicyParams) -> Gradient:
    return {k: np.zeros_like(a) for k, a in policy.arrays.items()}


def add_scaled(acc: Gradient, grad: Gradient, scale: float) -> Gradient:
    """In-place ``acc += scale * grad``; returns ``acc``."""
    if scale != 0.0:
        for k, g in grad.items():
            acc[k] += scale * g
    return acc


def _check_inputs(policy: PolicyParams, prompt: Prompt, y: Sequence[int]) -> np.ndarray:
    if not 0 <= prompt.class_id < policy.class_count:
        raise InvalidInputError(f"prompt class {prompt.class_id} outside [0, {policy.class_count})")
    ids = np.asarray(y)
    if ids.ndim != 1 or ids.size == 0:
        raise InvalidInputError("response must be a non-empty 1-d token sequence")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InvalidInputError("token ids must be integers")
    if ids.min() < 0 or ids.max() >= policy.vocab_size:
        raise InvalidInputError(f"token id outside [0, {policy.vocab_size})")
    policy.check_finite()
    return ids.astype(np.int64)


def _prev_tokens(policy: PolicyParams, ids: np.ndarray) -> np.ndarray:
    return np.concatenate(([policy.bos], ids[:-1]))


def _mlp_hidden(policy: PolicyParams, c: int, prev: np.ndarray) -> np.ndarray:
    W1, b1 = policy.arrays["W1"], policy.arrays["b1"]
    pre = W1[:, c][None, :] + W1[:, policy.class_count + prev].T + b1
    return np.tanh(pre)


def step_logits(policy: PolicyParams, class_id: int, prev: np.ndarray) -> np.ndarray:
    """Logits of shape ``(len(prev), V)`` for each previous-token index."""
    prev = np.asarray(prev, dtype=np.int64)
    if policy.kind == "bigram":
        return policy.arrays["logits"][class_id, prev]
    h = _mlp_hidden(policy, class_id, prev)
    return h @ policy.arrays["W2"].T + policy.arrays["b2"]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def step_logprobs(policy: PolicyParams, prompt: Prompt, y: Sequence[int]) -> np.ndarray:
    """Full ``(|y|, V)`` log-probability table along the realized path."""
    ids = _check_inputs(policy, prompt, y)
    return log_softmax(step_logits(policy, prompt.class_id, _prev_tokens(policy, ids)))


def seq_logprob(policy: PolicyParams, prompt: Prompt, y: Sequence[int], normalize: bool = False) -> float:
    """``log pi(y | x)``, divided by ``|y|`` when ``normalize`` is set."""
    ids = _check_inputs(policy, prompt, y)
    lp = log_softmax(step_logits(policy, prompt.class_id, _prev_tokens(policy, ids)))
    total = float(lp[np.arange(ids.size), ids].sum())
    if not np.isfinite(total):
        raise NumericError("log-probability is not finite")
    return total / ids.size if normalize else total


def grad_seq_logprob(policy: PolicyParams, prompt: Prompt, y: Sequence[int], normalize: bool = False) -> Gradient:
    """Analytic gradient of :func:`seq_logprob` with respect to every array."""
    ids = _check_inputs(policy, prompt, y)
    c = prompt.class_id
    prev = _prev_tokens(policy, ids)
    T = ids.size
    logits = step_logits(policy, c, prev)
    probs = np.exp(log_softmax(logits))
    delta = -probs
    delta[np.arange(T), ids] += 1.0
    if normalize:
        delta /= T

    grad = zeros_like(policy)
    if policy.kind == "bigram":
        np.add.at(grad["logits"][c], prev, delta)
        return grad

    h = _mlp_hidden(policy, c, prev)
    grad["W2"] = delta.T @ h
    grad["b2"] = delta.sum(axis=0)
    dpre = (delta @ policy.arrays["W2"]) * (1.0 - h * h)
    grad["b1"] = dpre.sum(axis=0)
    dW1T = np.zeros((policy.arrays["W1"].shape[1], dpre.shape[1]))
    dW1T[c] += dpre.sum(axis=0)
    np.add.at(dW1T, policy.class_count + prev, dpre)
    grad["W1"] = dW1T.T.copy()
    return grad


def touched_mask(policy: PolicyParams, prompt: Prompt, responses: Iterable[Sequence[int]]) -> Dict[str, np.ndarray]:
    """Boolean masks of parameter coordinates that can influence the given responses."""
    masks = {k: np.zeros(a.shape, dtype=bool) for k, a in policy.arrays.items()}
    c = prompt.class_id
    for y in responses:
        ids = _check_inputs(policy, prompt, y)
        prev = _prev_tokens(policy, ids)
        if policy.kind == "bigram":
            masks["logits"][c, prev, :] = True
        else:
            masks["W1"][:, c] = True
            masks["W1"][:, policy.class_count + prev] = True
            masks["b1"][:] = True
            masks["W2"][:] = True
            masks["b2"][:] = True
    return masks


def sample(policy: PolicyParams, prompt: Prompt, max_len: int, rng: np.random.Generator,
           end_token: Optional[int] = None) -> TokenSeq:
    """Autoregressive categorical sample; stops after ``end_token`` or ``max_len`` tokens."""
    if max_len < 1:
        raise InvalidInputError("max_len must be >= 1")
    if not 0 <= prompt.class_id < policy.class_count:
        raise InvalidInputError(f"prompt class {prompt.class_id} outside [0, {policy.class_count})")
    policy.check_finite()
    out = []
    prev = policy.bos
    for _ in range(max_len):
        logits = step_logits(policy, prompt.class_id, np.array([prev]))[0]
        p = np.exp(log_softmax(logits))
        tok = int(rng.choice(policy.vocab_size, p=p / p.sum()))
        out.append(tok)
        if end_token is not None and tok == end_token:
            break
        prev = tok
    return tuple(out)


def sft_loss(policy: PolicyParams, dataset) -> float:
    """Mean negative unnormalized log-likelihood of the winning responses."""
    if not dataset:
        raise InvalidInputError("empty dataset")
    return -float(np.mean([seq_logprob(policy, t.prompt, t.y_w) for t in dataset]))


def _bigram_counts(policy: PolicyParams, dataset):
    counts = np.zeros_like(policy.arrays["logits"])
    for t in dataset:
        ids = _check_inputs(policy, t.prompt, t.y_w)
        np.add.at(counts[t.prompt.class_id], (_prev_tokens(policy, ids), ids), 1.0)
    return counts


def fit_sft(policy: PolicyParams, dataset, epochs: int, lr: float) -> PolicyParams:
    """Full-batch gradient ascent on the mean log-likelihood of winning responses.

    Each epoch is one step.  ``epochs == 0`` or ``lr == 0`` returns an exact copy.
    """
    if not dataset:
        raise InvalidInputError("empty dataset")
    if epochs < 0:
        raise InvalidInputError("epochs must be >= 0")
    params = policy.copy()
    if epochs == 0 or lr == 0:
        return params
    n = len(dataset)
    if params.kind == "bigram":
        # log-likelihood gradient is counts(c, u, v) - counts(c, u) * p(v | c, u)
        counts = _bigram_counts(params, dataset)
        row_totals = counts.sum(axis=-1, keepdims=True)
        logits = params.arrays["logits"]
        for _ in range(epochs):
            probs = np.exp(log_softmax(logits))
            logits = logits + (lr / n) * (counts - row_totals * probs)
        params = params.with_arrays({"logits": logits})
        params.check_finite()
        return params
    for _ in range(epochs):
        acc = zeros_like(params)
        for t in dataset:
            add_scaled(acc, grad_seq_logprob(params, t.prompt, t.y_w), 1.0 / n)
        params = params.with_arrays({k: params.arrays[k] + lr * acc[k] for k in params.arrays})
    params.check_finite()
    return params
