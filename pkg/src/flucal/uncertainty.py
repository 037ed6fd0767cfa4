"""Router-mass uncertainty, calibration and balance losses, and ECE.

The per-example uncertainty score is the mean kept top-k softmax mass over
every routed sublayer and token position. Calibrating it against the
correctness indicator with a squared loss drives it, at the optimum over
the data distribution, to the probability the prediction is correct.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

DEFAULT_BALANCE_COEFF = 1e-2
DEFAULT_ECE_BINS = 15


@dataclass
class FluRecord:
    """Scalar uncertainty score with its per-layer kept-mass breakdown."""

    value: float
    per_layer: dict  # layer index -> mean kept mass over that layer's routers


@dataclass
class LossBreakdown:
    ce: float
    load_balance: float
    calibration: float
    gamma: float
    beta: float

    @property
    def total(self):
        return self.ce + self.gamma * self.load_balance + self.beta * self.calibration


@dataclass
class CalibrationReport:
    accuracy: float
    ece: float
    n_bins: int
    n: int
    bin_counts: np.ndarray
    bin_acc: np.ndarray
    bin_conf: np.ndarray


# -- functional uncertainty ----------------------------------------------------


def compute_flu(trace):
    """Mean kept mass over layers, routed sublayers, and token positions."""
    if not trace.records:
        raise ContractError("trace has no routing records")
    per_layer_masses = {}
    all_masses = []
    for rec in trace.records:
        mass = rec.decision.kept_mass()
        per_layer_masses.setdefault(rec.layer, []).append(mass.mean())
        all_masses.append(mass.mean())
    per_layer = {layer: float(np.mean(vals)) for layer, vals in per_layer_masses.items()}
    return FluRecord(value=float(np.mean(all_masses)), per_layer=per_layer)


def flu_batch(result):
    """Differentiable per-example uncertainty [B] from a batched forward."""
    if not result.records:
        raise ContractError("forward result has no routing records")
    b, s = result.batch_size, result.seq_len
    acc = None
    for rec in result.records:
        per_example = ad.tmean(ad.reshape(rec.decision.kept_mass_t, (b, s)), axis=1)
        acc = per_example if acc is None else ad.add(acc, per_example)
    return ad.mul(acc, 1.0 / len(result.records))


# -- losses --------------------------------------------------------------------


def calibration_loss(correct, flu):
    """Mean squared gap between the correctness indicator and the uncertainty score.

    ``correct`` is treated as a constant: gradients flow only through ``flu``.
    Accepts a Tensor (differentiable) or an array for ``flu``.
    """
    correct = np.asarray(correct, dtype=np.float64)
    flu_t = flu if isinstance(flu, Tensor) else Tensor(np.asarray(flu, dtype=np.float64))
    if correct.shape != flu_t.data.shape:
        raise ContractError(
            f"length mismatch: {correct.shape} correctness vs {flu_t.data.shape} scores")
    diff = ad.add(flu_t, -correct)
    return ad.tmean(ad.mul(diff, diff))


def load_balance_loss(traces, n_experts, coeff=DEFAULT_BALANCE_COEFF):
    """Dispatch-vs-probability balance penalty over a batch of traces.

    For each routed sublayer position, pools tokens across the batch and
    computes coeff * K * sum_i F_i * P_i, where F_i is the fraction of tokens
    whose argmax probability picks expert i and P_i the mean full softmax
    probability of expert i. Sublayer losses are averaged.
    """
    if coeff <= 0:
        raise ContractError(f"balance coefficient must be > 0, got {coeff}")
    if not isinstance(traces, (list, tuple)):
        traces = [traces]
    groups = {}
    for trace in traces:
        for rec in trace.records:
            groups.setdefault((rec.layer, rec.sublayer), []).append(rec.decision.full_probs)
    if not groups:
        raise ContractError("no routing records in traces")
    losses = []
    for probs_list in groups.values():
        probs = np.concatenate(probs_list, axis=0)
        t = probs.shape[0]
        dispatch = np.argmax(probs, axis=1)  # ties -> lowest index
        frac = np.bincount(dispatch, minlength=n_experts) / t
        mean_prob = probs.mean(axis=0)
        losses.append(coeff * n_experts * float(frac @ mean_prob))
    return float(np.mean(losses))


def load_balance_loss_batch(result, coeff=DEFAULT_BALANCE_COEFF):
    """Differentiable balance penalty from a batched forward result.

    F_i is a constant (argmax indicator); gradient flows through P_i only.
    """
    if coeff <= 0:
        raise ContractError(f"balance coefficient must be > 0, got {coeff}")
    losses = None
    for rec in result.records:
        probs = rec.decision.probs_t
        t, k = probs.shape
        dispatch = np.argmax(probs.data, axis=1)
        frac = np.bincount(dispatch, minlength=k) / t
        mean_prob = ad.tmean(probs, axis=0)
        term = ad.mul(ad.tsum(ad.mul(mean_prob, frac)), coeff * k)
        losses = term if losses is None else ad.add(losses, term)
    if losses is None:
        raise ContractError("no routing records in result")
    return ad.mul(losses, 1.0 / len(result.records))


def total_loss(ce, load_balance, calibration, gamma=1.0, beta=1.0):
    """Weighted objective ce + gamma * balance + beta * calibration."""
    if gamma < 0 or beta < 0:
        raise ContractError(f"gamma and beta must be >= 0, got {gamma}, {beta}")
    if isinstance(ce, Tensor) or isinstance(load_balance, Tensor) or isinstance(calibration, Tensor):
        out = ce
        if gamma != 0.0:
            out = ad.add(out, ad.mul(load_balance, gamma))
        if beta != 0.0:
            out = ad.add(out, ad.mul(calibration, beta))
        return out
    return float(ce) + gamma * float(load_balance) + beta * float(calibration)


# -- expected calibration error -----------------------------------------------


def bin_index(confidence, n_bins):
    """Uniform bins on [0, 1] with right-inclusive upper edges; 0 lands in bin 0."""
    idx = np.ceil(np.asarray(confidence) * n_bins).astype(int) - 1
    return np.clip(idx, 0, n_bins - 1)


def expected_calibration_error(confidence, correct, n_bins=DEFAULT_ECE_BINS):
    confidence = np.asarray(confidence, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    if n_bins < 1:
        raise ContractError(f"bin count must be >= 1, got {n_bins}")
    if confidence.shape != correct.shape:
        raise ContractError(
            f"length mismatch: {confidence.shape} confidences vs {correct.shape} outcomes")
    if confidence.size and (confidence.min() < 0.0 or confidence.max() > 1.0):
        raise ContractError("confidences must lie in [0, 1]")
    n = confidence.size
    idx = bin_index(confidence, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    acc = np.zeros(n_bins)
    conf = np.zeros(n_bins)
    np.add.at(acc, idx, correct)
    np.add.at(conf, idx, confidence)
    nonempty = counts > 0
    acc[nonempty] /= counts[nonempty]
    conf[nonempty] /= counts[nonempty]
    ece = float(np.sum((counts[nonempty] / n) * np.abs(acc - conf)[nonempty])) if n else 0.0
    return CalibrationReport(
        accuracy=float(correct.mean()) if n else 0.0,
        ece=ece,
        n_bins=n_bins,
        n=n,
        bin_counts=counts,
        bin_acc=acc,
        bin_conf=conf,
    )


def reliability_bins_rows(report):
    """One row per bin: (lower edge, upper edge, count, acc, conf)."""
    rows = []
    for m in range(report.n_bins):
        rows.append((m / report.n_bins, (m + 1) / report.n_bins,
                     int(report.bin_counts[m]),
                     float(report.bin_acc[m]), float(report.bin_conf[m])))
    return rows


def reliability_bins_export(report, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count", "acc", "conf"])
        for row in reliability_bins_rows(report):
            writer.writerow([repr(row[0]), repr(row[1]), row[2], repr(row[3]), repr(row[4])])
