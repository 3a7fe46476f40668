"""Synthetic Bradley-Terry preference data from a latent transition reward."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import InvalidInputError, ParseError
from .policy import PolicyParams, Prompt, TokenSeq, sample

LABELINGS = ("bt_sample", "argmax")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class PreferenceTriple:
    prompt: Prompt
    y_w: TokenSeq
    y_l: TokenSeq

    def __post_init__(self):
        if len(self.y_w) == 0 or len(self.y_l) == 0:
            raise InvalidInputError("responses must be non-empty")


@dataclass
class GoldRewardSpec:
    weights: np.ndarray
    length_penalty: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 3 or self.weights.shape[1] != self.weights.shape[2] + 1:
            raise InvalidInputError(f"gold weights must have shape C x (V+1) x V, got {self.weights.shape}")
        if not np.isfinite(self.weights).all() or not np.isfinite(self.length_penalty):
            raise InvalidInputError("gold reward entries must be finite")

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[2]

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    def checksum(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.weights, dtype="<f8").tobytes())
        h.update(np.float64(self.length_penalty).astype("<f8").tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, GoldRewardSpec):
            return NotImplemented
        return self.length_penalty == other.length_penalty and np.array_equal(self.weights, other.weights)


def random_gold(vocab_size: int, class_count: int, rng: np.random.Generator, scale: float = 1.0,
                length_penalty: float = 0.0) -> GoldRewardSpec:
    weights = scale * rng.standard_normal((class_count, vocab_size + 1, vocab_size))
    return GoldRewardSpec(weights, length_penalty)


@dataclass
class DatasetMeta:
    vocab_size: int
    class_count: int
    max_len: int
    seed: int
    gold: GoldRewardSpec
    labeling: str = "bt_sample"
    end_token: Optional[int] = None

    def __post_init__(self):
        if self.labeling not in LABELINGS:
            raise InvalidInputError(f"labeling must be one of {LABELINGS}")
        if self.max_len < 1:
            raise InvalidInputError("max_len must be >= 1")
        if (self.gold.class_count, self.gold.vocab_size) != (self.class_count, self.vocab_size):
            raise InvalidInputError("gold reward shape does not match vocab_size / class_count")
        if self.end_token is not None and not 0 <= self.end_token < self.vocab_size:
            raise InvalidInputError("end_token outside the vocabulary")

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "vocab_size": self.vocab_size,
            "class_count": self.class_count,
            "max_len": self.max_len,
            "seed": self.seed,
            "labeling": self.labeling,
            "end_token": self.end_token,
            "gold": {
                "weights": self.gold.weights.tolist(),
                "length_penalty": self.gold.length_penalty,
                "checksum": self.gold.checksum(),
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetMeta":
        if obj.get("format_version") != FORMAT_VERSION:
            raise InvalidInputError(f"unsupported dataset format version {obj.get('format_version')!r}")
        g = obj["gold"]
        gold = GoldRewardSpec(np.array(g["weights"], dtype=np.float64), float(g["length_penalty"]))
        if gold.checksum() != g["checksum"]:
            raise InvalidInputError("gold reward checksum mismatch")
        return cls(int(obj["vocab_size"]), int(obj["class_count"]), int(obj["max_len"]), int(obj["seed"]),
                   gold, obj["labeling"], obj.get("end_token"))


def _validate_tokens(spec: GoldRewardSpec, prompt: Prompt, y: Sequence[int]):
    if not 0 <= prompt.class_id < spec.class_count:
        raise InvalidInputError(f"prompt class {prompt.class_id} outside [0, {spec.class_count})")
    if len(y) == 0:
        raise InvalidInputError("response must be non-empty")
    for tok in y:
        if not 0 <= tok < spec.vocab_size:
            raise InvalidInputError(f"token id {tok} outside [0, {spec.vocab_size})")


def gold_reward(spec: GoldRewardSpec, prompt: Prompt, y: Sequence[int]) -> float:
    """Sum of transition weights along ``y`` minus ``length_penalty * |y|``."""
    _validate_tokens(spec, prompt, y)
    ids = np.asarray(y, dtype=np.int64)
    prev = np.concatenate(([spec.vocab_size], ids[:-1]))
    return float(spec.weights[prompt.class_id, prev, ids].sum() - spec.length_penalty * ids.size)


def bt_prefer(r_a: float, r_b: float, rng: np.random.Generator) -> bool:
    """Draw a Bradley-Terry preference; True means ``a`` wins."""
    if not (np.isfinite(r_a) and np.isfinite(r_b)):
        raise InvalidInputError("rewards must be finite")
    d = r_a - r_b
    # sigmoid(d) evaluated without overflow
    p = 1.0 / (1.0 + np.exp(-d)) if d >= 0 else np.exp(d) / (1.0 + np.exp(d))
    return bool(rng.random() < p)


def make_dataset(meta: DatasetMeta, n: int, sampler: PolicyParams,
                 rng: Optional[np.random.Generator] = None) -> List[PreferenceTriple]:
    """Sample ``n`` labelled pairs; the default stream is seeded from ``meta.seed``."""
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    if (sampler.vocab_size, sampler.class_count) != (meta.vocab_size, meta.class_count):
        raise InvalidInputError("sampler policy does not match dataset vocab_size / class_count")
    if rng is None:
        rng = np.random.default_rng(meta.seed)
    triples = []
    for _ in range(n):
        prompt = Prompt(int(rng.integers(meta.class_count)))
        a = sample(sampler, prompt, meta.max_len, rng, meta.end_token)
        b = sample(sampler, prompt, meta.max_len, rng, meta.end_token)
        r_a, r_b = gold_reward(meta.gold, prompt, a), gold_reward(meta.gold, prompt, b)
        if meta.labeling == "argmax":
            a_wins = r_a >= r_b
        else:
            a_wins = bt_prefer(r_a, r_b, rng)
        triples.append(PreferenceTriple(prompt, a, b) if a_wins else PreferenceTriple(prompt, b, a))
    return triples


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_dataset(path, meta: DatasetMeta, triples: Sequence[PreferenceTriple]):
    """Write a header line with ``meta`` followed by one JSON record per triple."""
    lines = [_dump({"meta": meta.to_json()})]
    for t in triples:
        lines.append(_dump({"prompt_class": t.prompt.class_id, "y_w": list(t.y_w), "y_l": list(t.y_l)}))
    Path(path).write_text("\n".join(lines) + "\n")


def _int_list(rec, key, lineno):
    seq = rec.get(key)
    if not isinstance(seq, list) or not seq or not all(isinstance(v, int) and not isinstance(v, bool) for v in seq):
        raise ParseError(f"field {key!r} must be a non-empty integer array", lineno)
    return tuple(seq)


def load_dataset(path):
    """Inverse of :func:`save_dataset`; returns ``(meta, triples)``."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty dataset file", 1)
    try:
        header = json.loads(lines[0])
        meta = DatasetMeta.from_json(header["meta"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed header: {exc}", 1) from exc
    except InvalidInputError as exc:
        raise ParseError(str(exc), 1) from exc
    if not text.endswith("\n"):
        raise ParseError("truncated record (missing line terminator)", len(lines))
    triples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed record: {exc.msg}", lineno) from exc
        if not isinstance(rec, dict):
            raise ParseError("record must be an object", lineno)
        c = rec.get("prompt_class")
        if not isinstance(c, int) or isinstance(c, bool) or not 0 <= c < meta.class_count:
            raise ParseError(f"prompt_class {c!r} outside [0, {meta.class_count})", lineno)
        y_w, y_l = _int_list(rec, "y_w", lineno), _int_list(rec, "y_l", lineno)
        for tok in y_w + y_l:
            if not 0 <= tok < meta.vocab_size:
                raise ParseError(f"token id {tok} outside [0, {meta.vocab_size})", lineno)
        if len(y_w) > meta.max_len or len(y_l) > meta.max_len:
            raise ParseError(f"response longer than max_len={meta.max_len}", lineno)
        triples.append(PreferenceTriple(Prompt(c), y_w, y_l))
    return meta, triples
