"""Evaluation metrics: accuracy, reconstruction MSE, SynOps ratio, SI-SDR and PIT."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

# SI-SDR returned for a zero-residual estimate (the true value is unbounded)
SI_SDR_CAP_DB = 120.0


def _labels(targets):
    t = np.asarray(targets)
    return t.argmax(axis=1) if t.ndim == 2 else t.astype(np.int64)


def evaluate_metrics(kind, predictions, targets):
    """``accuracy``: fraction of argmax matches; ``mse``: mean squared elementwise error."""
    predictions = np.asarray(predictions)
    if predictions.shape[0] == 0:
        raise ValueError("empty evaluation set")
    if kind == "accuracy":
        return float(np.mean(predictions.argmax(axis=1) == _labels(targets)))
    if kind == "mse":
        return float(np.mean((predictions - np.asarray(targets)) ** 2))
    raise ValueError(f"unknown metric {kind!r}")


@dataclass
class SynOpsLedger:
    """Synaptic operation counts summed over ``n_inferences`` inferences.

    ``ann_ops`` is the per-inference MAC count of the analog network (a
    constant of the architecture). ``snn_ops`` accumulates spike-driven
    accumulate operations (spikes times fan-out) plus, if the caller adds
    them, the analog MACs of the encoding layer.
    """

    ann_ops: int
    snn_ops: int = 0
    n_inferences: int = 0

    def __post_init__(self):
        if self.ann_ops <= 0:
            raise ValueError("ann_ops must be positive")

    def add(self, snn_ops, n_inferences):
        self.snn_ops += int(snn_ops)
        self.n_inferences += int(n_inferences)

    def merge(self, other: "SynOpsLedger"):
        if other.ann_ops != self.ann_ops:
            raise ValueError("cannot merge ledgers of different architectures")
        return SynOpsLedger(self.ann_ops, self.snn_ops + other.snn_ops, self.n_inferences + other.n_inferences)

    @property
    def snn_ops_per_inference(self):
        return self.snn_ops / max(self.n_inferences, 1)

    @property
    def ratio(self):
        return synops_ratio(self)


def synops_ratio(ledger: SynOpsLedger) -> float:
    return ledger.snn_ops_per_inference / ledger.ann_ops


def _zero_mean(x):
    x = np.asarray(x, dtype=np.float64)
    return x - x.mean(axis=-1, keepdims=True)


def si_sdr(estimate, reference):
    """Scale-invariant SDR in dB between zero-meaned signals.

    The reference is projected onto the estimate's direction; the ratio of
    the projection's energy to the residual's is reported. Values are capped
    at +120 dB (zero residual) and floored at -120 dB (zero-energy estimate).
    """
    est = _zero_mean(estimate)
    ref = _zero_mean(reference)
    if est.shape != ref.shape or est.shape[-1] < 2:
        raise ValueError("estimate and reference must have equal length >= 2")
    e_ref = float(ref @ ref)
    if e_ref == 0.0:
        raise ValueError("reference is constant (zero energy after mean removal)")
    alpha = float(est @ ref) / e_ref
    target = alpha * ref
    noise = target - est
    t, n = float(target @ target), float(noise @ noise)
    if t == 0.0:
        return -SI_SDR_CAP_DB
    if n == 0.0:
        return SI_SDR_CAP_DB
    return float(min(10.0 * math.log10(t / n), SI_SDR_CAP_DB))


def si_sdr_batch(estimates, references, eps=1e-12):
    """Uncapped SI-SDR for the last axis of batched signals, plus its gradient w.r.t. ``estimates``.

    Uses ``SI-SDR = 10 log10(a^2 / (E e - a^2))`` with ``a = <est, ref>``,
    ``e = <est, est>`` and ``E = <ref, ref>`` on zero-meaned signals.
    """
    est = _zero_mean(estimates)
    ref = _zero_mean(references)
    a = np.sum(est * ref, axis=-1, keepdims=True)
    e = np.sum(est * est, axis=-1, keepdims=True)
    E = np.sum(ref * ref, axis=-1, keepdims=True)
    denom = E * e - a * a + eps
    num = a * a + eps
    value = 10.0 / math.log(10.0) * (np.log(num) - np.log(denom))
    k = 10.0 / math.log(10.0)
    grad = k * (2.0 * a * ref / num - (2.0 * E * est - 2.0 * a * ref) / denom)
    grad = grad - grad.mean(axis=-1, keepdims=True)
    return value[..., 0], grad


def pit_si_sdr(estimates, references):
    """Best mean SI-SDR over all estimate-to-reference assignments.

    Returns ``(score, perm)`` where ``estimates[perm[i]]`` is matched with
    ``references[i]``. Ties keep the earlier permutation (identity first).
    """
    estimates = np.asarray(estimates)
    references = np.asarray(references)
    n = len(references)
    if len(estimates) != n:
        raise ValueError("need as many estimates as references")
    best, best_perm = -math.inf, None
    for perm in itertools.permutations(range(n)):
        score = float(np.mean([si_sdr(estimates[perm[i]], references[i]) for i in range(n)]))
        if score > best:
            best, best_perm = score, perm
    return best, tuple(best_perm)
