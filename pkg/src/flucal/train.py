"""Training loop with the combined objective, evaluation, and sweeps.

Only adapters, routers, and the classification head receive updates; the
frozen base is asserted untouched. Everything is deterministic given
(config, seed): dataset order, dropout masks, and optimizer state all
derive from the run seed.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import uncertainty as unc
from .model import (ConfigError, ModelConfig, init_model, save_checkpoint)

BETA_SCHEDULE_MODES = ("constant", "incremental")
INCREMENTAL_RAMP_STEPS = 50
DEFAULT_BETA_GRID = (0.0, 0.2, 0.5, 0.8, 1.0, 1.2, 1.5, 1.8, 2.0)
DEFAULT_TOPK_GRID = (1, 2, 3, 4, 5)
DEFAULT_SWEEP_SEEDS = (0, 1, 2, 3, 4)

METRICS_HEADER = ["step", "ce", "lb", "cal", "total", "val_acc", "val_ece", "mean_flu"]


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: data_mod.TaskSpec = field(default_factory=data_mod.TaskSpec)
    dataset_path: str = None  # overrides task generation when set
    learning_rate: float = 2e-4
    dropout: float = 0.05
    batch_size: int = 16
    max_steps: int = 2000
    gamma: float = 1.0
    beta: float = 1.0
    beta_schedule_mode: str = "constant"
    balance_coeff: float = 1e-2
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 100
    seed: int = 0
    out_dir: str = None

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.task, dict):
            self.task = data_mod.TaskSpec.from_dict(self.task)
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.gamma < 0 or self.beta < 0:
            raise ConfigError("gamma and beta must be >= 0")
        if self.beta_schedule_mode not in BETA_SCHEDULE_MODES:
            raise ConfigError(f"unknown beta schedule mode {self.beta_schedule_mode!r}")

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "task": self.task.to_dict(),
            "dataset_path": self.dataset_path,
            "learning_rate": self.learning_rate,
            "dropout": self.dropout,
            "batch_size": self.batch_size,
            "max_steps": self.max_steps,
            "gamma": self.gamma,
            "beta": self.beta,
            "beta_schedule_mode": self.beta_schedule_mode,
            "balance_coeff": self.balance_coeff,
            "weight_decay": self.weight_decay,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "eval_every": self.eval_every,
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)  # dicts keyed by METRICS_HEADER
    final_reports: dict = field(default_factory=dict)  # split -> CalibrationReport

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)
            for row in self.rows:
                writer.writerow([row["step"]] + [repr(row[k]) for k in METRICS_HEADER[1:]])


def beta_schedule(mode, step, beta=1.0):
    """Calibration-term weight at a given gradient step."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if mode == "constant":
        return beta
    if mode == "incremental":
        return min(1.0, step / INCREMENTAL_RAMP_STEPS)
    raise ConfigError(f"unknown beta schedule mode {mode!r}")


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0, decay_filter=None):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.decay_filter = decay_filter or (lambda name: True)
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.v = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, (name, p) in enumerate(self.named_params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            update = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            if self.weight_decay and self.decay_filter(name):
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * update

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None


def _adapter_or_router(name):
    return ".experts." in name or ".router." in name


def batch_arrays(examples):
    tokens = np.asarray([ex.tokens for ex in examples], dtype=np.intp)
    labels = np.asarray([ex.label for ex in examples], dtype=np.intp)
    return tokens, labels


def objective(model, tokens, labels, gamma, beta, balance_coeff,
              dropout=0.0, dropout_rng=None):
    """Full training objective on one batch; returns (scalar Tensor, LossBreakdown)."""
    result = model.forward_batch(tokens, dropout_rate=dropout, dropout_rng=dropout_rng)
    ce = ad.tmean(ad.cross_entropy_batch(result.logits, labels))
    lb = unc.load_balance_loss_batch(result, coeff=balance_coeff)
    correct = (np.argmax(result.logits.data, axis=1) == labels)
    flu = unc.flu_batch(result)
    cal = unc.calibration_loss(correct.astype(np.float64), flu)
    total = unc.total_loss(ce, lb, cal, gamma=gamma, beta=beta)
    breakdown = unc.LossBreakdown(ce=float(ce.data), load_balance=float(lb.data),
                                  calibration=float(cal.data), gamma=gamma, beta=beta)
    return total, breakdown


def predict(model, examples, batch_size=64):
    """Per-example (confidence, correctness, uncertainty score) without dropout."""
    confs, corrects, flus = [], [], []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        tokens, labels = batch_arrays(chunk)
        result = model.forward_batch(tokens)
        logits = result.logits.data
        z = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        confs.append(probs.max(axis=1))
        corrects.append(np.argmax(logits, axis=1) == labels)
        flus.append(unc.flu_batch(result).data)
    return (np.concatenate(confs), np.concatenate(corrects).astype(np.float64),
            np.concatenate(flus))


def evaluate(model, examples, n_bins=unc.DEFAULT_ECE_BINS, batch_size=64):
    """Single-pass accuracy + ECE report for a split."""
    if not examples:
        raise ConfigError("cannot evaluate an empty split")
    cfg = model.config
    for ex in examples:
        if len(ex.tokens) != cfg.seq_len:
            raise ConfigError(
                f"seq_len mismatch: example has {len(ex.tokens)}, model expects {cfg.seq_len}")
        if max(ex.tokens) >= cfg.vocab_size:
            raise ConfigError(
                f"vocab_size mismatch: token {max(ex.tokens)} >= model vocab {cfg.vocab_size}")
        if ex.label >= cfg.n_classes:
            raise ConfigError(
                f"n_classes mismatch: label {ex.label} >= model classes {cfg.n_classes}")
    conf, correct, _ = predict(model, examples, batch_size=batch_size)
    return unc.expected_calibration_error(conf, correct, n_bins=n_bins)


def load_or_generate(config):
    if config.dataset_path:
        return data_mod.read_dataset(config.dataset_path)
    examples = data_mod.generate_task(config.task, config.seed)
    examples += data_mod.generate_shifted_split(config.task, "large", config.seed)
    return examples


def train(config, examples=None, quiet=True):
    """Fit a model per the config; returns (model, RunRecord)."""
    if examples is None:
        examples = load_or_generate(config)
    train_set = data_mod.split_examples(examples, "train")
    val_set = data_mod.split_examples(examples, "val")
    if not train_set:
        raise ConfigError("dataset has no train split")

    model = init_model(config.model, config.seed)
    frozen_before = {n: p.data.copy() for n, p in model.named_parameters().items()
                     if not p.requires_grad}
    named = sorted(model.trainable_parameters().items())
    opt = AdamW(named, lr=config.learning_rate, beta1=config.adam_beta1,
                beta2=config.adam_beta2, eps=config.adam_eps,
                weight_decay=config.weight_decay, decay_filter=_adapter_or_router)
    dropout_rng = np.random.default_rng(data_mod._rng(config.seed, "dropout").integers(2**63))
    record = RunRecord()

    step = 0
    epoch = 0
    done = False
    while not done:
        for batch in data_mod.batch_iter(train_set, config.batch_size,
                                         data_mod._rng(config.seed, "epoch", epoch).integers(2**63)):
            if step >= config.max_steps:
                done = True
                break
            beta = beta_schedule(config.beta_schedule_mode, step, config.beta)
            tokens, labels = batch_arrays(batch)
            total, breakdown = objective(
                model, tokens, labels, config.gamma, beta, config.balance_coeff,
                dropout=config.dropout, dropout_rng=dropout_rng)
            if not math.isfinite(float(total.data)):
                raise RuntimeError(
                    f"non-finite loss at step {step}: ce={breakdown.ce} "
                    f"lb={breakdown.load_balance} cal={breakdown.calibration}")
            opt.zero_grad()
            ad.backward(total)
            opt.step()
            step += 1
            if step % config.eval_every == 0 or step == config.max_steps:
                report = evaluate(model, val_set) if val_set else None
                _, _, flu = predict(model, val_set if val_set else train_set[:64])
                row = {"step": step, "ce": breakdown.ce, "lb": breakdown.load_balance,
                       "cal": breakdown.calibration, "total": float(total.data),
                       "val_acc": report.accuracy if report else float("nan"),
                       "val_ece": report.ece if report else float("nan"),
                       "mean_flu": float(flu.mean())}
                record.rows.append(row)
                if not quiet:
                    print(f"step {step}: total={row['total']:.4f} "
                          f"val_acc={row['val_acc']:.3f} val_ece={row['val_ece']:.4f} "
                          f"flu={row['mean_flu']:.3f}")
        epoch += 1

    for name, before in frozen_before.items():
        after = model.named_parameters()[name].data
        if not np.array_equal(before, after):
            raise RuntimeError(f"frozen parameter {name} changed during training")

    for split in ("val", "test", "shift"):
        part = data_mod.split_examples(examples, split)
        if part:
            record.final_reports[split] = evaluate(model, part)

    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        save_checkpoint(model, os.path.join(config.out_dir, "checkpoint.json"), step=step)
        record.to_csv(os.path.join(config.out_dir, "metrics.csv"))
        if "val" in record.final_reports:
            unc.reliability_bins_export(record.final_reports["val"],
                                        os.path.join(config.out_dir, "bins.csv"))
    return model, record


# -- sweeps --------------------------------------------------------------------


def _config_with(config, **overrides):
    d = config.to_dict()
    d.update(overrides)
    return TrainConfig.from_dict(d)


def beta_sweep(config, betas=DEFAULT_BETA_GRID, seeds=DEFAULT_SWEEP_SEEDS, quiet=True):
    """Train+evaluate per (beta, seed); rows of (beta, seed, acc, ece)."""
    if not betas:
        raise ConfigError("beta grid must be nonempty")
    rows = []
    for beta in betas:
        for seed in seeds:
            run_cfg = _config_with(config, beta=float(beta), seed=int(seed), out_dir=None)
            _, record = train(run_cfg, quiet=quiet)
            report = record.final_reports["val"]
            rows.append((float(beta), int(seed), report.accuracy, report.ece))
    return rows


def topk_sweep(config, ks=DEFAULT_TOPK_GRID, seeds=DEFAULT_SWEEP_SEEDS, quiet=True):
    """Train+evaluate per (top_k, seed); rows of (k, seed, acc, ece)."""
    rows = []
    for k in ks:
        if k > config.model.n_experts:
            raise ConfigError(f"top_k {k} exceeds expert count {config.model.n_experts}")
        model_d = config.model.to_dict()
        model_d["top_k"] = int(k)
        for seed in seeds:
            run_cfg = _config_with(config, model=model_d, seed=int(seed), out_dir=None)
            _, record = train(run_cfg, quiet=quiet)
            report = record.final_reports["val"]
            rows.append((int(k), int(seed), report.accuracy, report.ece))
    return rows


def sweep_to_csv(rows, path, param_name="param"):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "seed", "acc", "ece"])
        for param, seed, acc, ece in rows:
            writer.writerow([repr(param), seed, repr(acc), repr(ece)])
