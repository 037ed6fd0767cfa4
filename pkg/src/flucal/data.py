"""Deterministic synthetic multiple-choice tasks with controllable shift.

Each example is drawn from a latent regime: a regime-specific token
distribution, a fixed linear labeling rule over the token bag, and a
per-regime label-noise rate. The noise rate pins the Bayes accuracy of
each regime, which is what the calibration experiments need to observe.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np


def _rng(seed, *tags):
    """Deterministic per-purpose generator derived from (seed, tags)."""
    digest = hashlib.sha256(repr((int(seed),) + tags).encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))

SPLIT_SIZES = {"train": 2000, "val": 500, "test": 500}
SHIFT_SIZE = 500
SHIFT_LEVELS = ("none", "small", "large")


class DatasetParseError(ValueError):
    """A dataset file line is malformed."""


@dataclass
class TaskSpec:
    vocab_size: int = 32
    seq_len: int = 16
    n_classes: int = 4
    noise_rates: tuple = (0.0, 0.1, 0.25, 0.4)
    proportions: tuple = None
    shift_reweight: tuple = None  # regime proportions under shift
    shift_rule_angle: float = 0.6  # rule perturbation magnitude for large shift
    min_margin: float = 0.0  # reject token bags whose top-2 rule scores are closer
    split_sizes: dict = field(default_factory=lambda: dict(SPLIT_SIZES))
    shift_size: int = SHIFT_SIZE

    def __post_init__(self):
        self.noise_rates = tuple(float(r) for r in self.noise_rates)
        if any(not 0.0 <= r < 0.5 for r in self.noise_rates):
            raise ValueError("noise rates must lie in [0, 0.5)")
        r = self.n_regimes
        if self.proportions is None:
            self.proportions = tuple(1.0 / r for _ in range(r))
        self.proportions = tuple(float(p) for p in self.proportions)
        if len(self.proportions) != r or abs(sum(self.proportions) - 1.0) > 1e-9:
            raise ValueError("proportions must match regime count and sum to 1")
        if self.shift_reweight is None:
            # default shift: skew mass toward the noisiest regimes
            weights = np.arange(1, r + 1, dtype=np.float64)
            self.shift_reweight = tuple(weights / weights.sum())
        self.shift_reweight = tuple(float(p) for p in self.shift_reweight)
        if len(self.shift_reweight) != r or abs(sum(self.shift_reweight) - 1.0) > 1e-9:
            raise ValueError("shift proportions must match regime count and sum to 1")

    @property
    def n_regimes(self):
        return len(self.noise_rates)

    def to_dict(self):
        d = asdict(self)
        for key in ("noise_rates", "proportions", "shift_reweight"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Example:
    tokens: list
    label: int
    regime: int
    split: str


class Regime:
    """Token distribution plus a deterministic labeling rule."""

    def __init__(self, token_probs, rule):
        self.token_probs = token_probs  # [vocab]
        self.rule = rule  # [C, vocab], applied to the normalized token bag

    def label_for(self, tokens, vocab_size):
        bag = np.bincount(tokens, minlength=vocab_size) / len(tokens)
        scores = self.rule @ bag
        return int(np.argmax(scores))

    def margin_for(self, tokens, vocab_size):
        """Gap between the two largest class scores of the token bag."""
        bag = np.bincount(tokens, minlength=vocab_size) / len(tokens)
        scores = np.sort(self.rule @ bag)
        return float(scores[-1] - scores[-2]) if scores.size > 1 else np.inf


def _build_regimes(spec, seed):
    rng = np.random.default_rng(seed)
    regimes = []
    for _ in range(spec.n_regimes):
        conc = rng.gamma(0.5, 1.0, size=spec.vocab_size) + 1e-3
        token_probs = conc / conc.sum()
        rule = rng.normal(size=(spec.n_classes, spec.vocab_size))
        regimes.append(Regime(token_probs, rule))
    return regimes


def _perturb_rule(rule, angle, rng):
    """Rotate the rule toward a fresh random direction by a fixed angle."""
    fresh = rng.normal(size=rule.shape)
    fresh *= np.linalg.norm(rule) / np.linalg.norm(fresh)
    return np.cos(angle) * rule + np.sin(angle) * fresh


def _sample_examples(spec, regimes, proportions, n, split, rng):
    examples = []
    regime_ids = rng.choice(spec.n_regimes, size=n, p=np.asarray(proportions))
    for rid in regime_ids:
        regime = regimes[rid]
        tokens = rng.choice(spec.vocab_size, size=spec.seq_len, p=regime.token_probs)
        if spec.min_margin > 0.0:
            for _ in range(1000):
                if regime.margin_for(tokens, spec.vocab_size) >= spec.min_margin:
                    break
                tokens = rng.choice(spec.vocab_size, size=spec.seq_len,
                                    p=regime.token_probs)
        label = regime.label_for(tokens, spec.vocab_size)
        noise = spec.noise_rates[rid]
        if noise > 0.0 and rng.random() < noise:
            others = [c for c in range(spec.n_classes) if c != label]
            label = int(rng.choice(others))
        examples.append(Example(tokens=tokens.tolist(), label=label,
                                regime=int(rid), split=split))
    return examples


def generate_task(spec, seed):
    """All base splits (train/val/test), fully determined by (spec, seed)."""
    regimes = _build_regimes(spec, seed)
    examples = []
    for split, n in spec.split_sizes.items():
        rng = _rng(seed, "split", split)
        examples.extend(_sample_examples(spec, regimes, spec.proportions, n, split, rng))
    return examples


def generate_shifted_split(spec, shift_level, seed):
    """Extra 'shift' split: reweighted regimes, optionally perturbed rules."""
    if shift_level not in SHIFT_LEVELS:
        raise ValueError(f"shift level must be one of {SHIFT_LEVELS}, got {shift_level!r}")
    regimes = _build_regimes(spec, seed)
    proportions = spec.proportions
    if shift_level in ("small", "large"):
        proportions = spec.shift_reweight
    if shift_level == "large":
        rule_rng = _rng(seed, "shift-rules")
        for regime in regimes:
            regime.rule = _perturb_rule(regime.rule, spec.shift_rule_angle, rule_rng)
    rng = _rng(seed, "split", "shift", shift_level)
    return _sample_examples(spec, regimes, proportions, spec.shift_size, "shift", rng)


def bayes_rule_accuracy(spec, seed, regime_id, n=10000):
    """Monte-Carlo accuracy of the generator's own rule on fresh noisy samples."""
    regimes = _build_regimes(spec, seed)
    rng = _rng(seed, "bayes", regime_id)
    hits = 0
    examples = _sample_examples(spec, regimes, np.eye(spec.n_regimes)[regime_id],
                                n, "probe", rng)
    regime = regimes[regime_id]
    for ex in examples:
        if regime.label_for(np.asarray(ex.tokens), spec.vocab_size) == ex.label:
            hits += 1
    return hits / n


# -- persistence ---------------------------------------------------------------


def write_dataset(examples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"tokens": ex.tokens, "label": ex.label,
                                 "regime": ex.regime, "split": ex.split}) + "\n")


def read_dataset(path):
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                examples.append(Example(tokens=[int(t) for t in obj["tokens"]],
                                        label=int(obj["label"]),
                                        regime=int(obj["regime"]),
                                        split=str(obj["split"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetParseError(f"line {lineno}: {exc}") from exc
    return examples


def split_examples(examples, split):
    return [ex for ex in examples if ex.split == split]


def batch_iter(examples, batch_size, epoch_seed):
    """Seeded shuffle, full coverage, final partial batch included."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(epoch_seed)
    order = rng.permutation(len(examples))
    for start in range(0, len(examples), batch_size):
        yield [examples[i] for i in order[start:start + batch_size]]
