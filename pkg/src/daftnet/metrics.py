"""Task losses and evaluation metrics for diagnosis and right-censored survival."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class SurvivalLabel:
    time: float
    event: bool

    def __post_init__(self):
        if not (np.isfinite(self.time) and self.time > 0):
            raise ValueError(f"survival time must be finite and positive, got {self.time!r}")


class NoEventsError(ValueError):
    """The mini-batch holds no observed event, so the Cox loss is undefined; resample it."""


def as_survival_arrays(labels) -> tuple[np.ndarray, np.ndarray]:
    """Accept a list of SurvivalLabel, a (time, event) pair of arrays or an (n, 2) array."""
    if isinstance(labels, tuple) and len(labels) == 2:
        time, event = labels
    elif len(labels) and isinstance(labels[0], SurvivalLabel):
        time = [lab.time for lab in labels]
        event = [lab.event for lab in labels]
    else:
        arr = np.asarray(labels)
        if arr.dtype.names:
            return np.asarray(arr["time"], float), np.asarray(arr["event"], bool)
        time, event = arr[:, 0], arr[:, 1]
    return np.asarray(time, dtype=float), np.asarray(event).astype(bool)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    labels = np.asarray(labels, dtype=int)
    n, k = logits.shape
    if n == 0:
        raise ValueError("cross_entropy of an empty batch")
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be {n} class indices in [0, {k})")
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1
    picked = T.tsum(T.mul(logits, Tensor(onehot)), axis=1)
    return T.mean(T.sub(T.logsumexp(logits, axis=1), picked))


def cox_ph_loss(risk: Tensor, labels) -> Tensor:
    """Negative Cox partial log-likelihood averaged over events (Breslow ties).

    Risk sets are formed within the batch: for each event i the denominator
    runs over every subject j with ``t_j >= t_i``.
    """
    time, event = as_survival_arrays(labels)
    risk = T.reshape(risk, (-1, 1))
    n = risk.shape[0]
    if time.shape != (n,):
        raise ValueError(f"{n} risk scores but {time.size} labels")
    idx = np.flatnonzero(event)
    if idx.size == 0:
        raise NoEventsError("batch has no observed events; resample it before computing the Cox loss")
    at_risk = (time[None, :] >= time[idx, None]).astype(risk.dtype)
    select = np.zeros((idx.size, n), dtype=risk.dtype)
    select[np.arange(idx.size), idx] = 1
    # the max shift is a constant, so the gradient of log-sum-exp is unchanged
    shift = float(risk.data.max())
    denom = T.log(T.matmul(Tensor(at_risk), T.exp(T.sub(risk, shift))))
    terms = T.sub(T.matmul(Tensor(select), risk), T.add(denom, shift))
    return T.neg(T.mean(terms))


def balanced_accuracy(predicted, truth, classes=None, return_recalls: bool = False):
    """Unweighted mean of per-class recall.

    ``classes`` lists the classes whose recall is required; any of them absent
    from ``truth`` raises, since its recall is undefined. By default the classes
    present in ``truth`` are used.
    """
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {truth.shape}")
    if truth.size == 0:
        raise ValueError("balanced_accuracy of an empty set")
    present = np.unique(truth)
    if classes is not None:
        missing = sorted(set(int(c) for c in classes) - set(present.tolist()))
        if missing:
            raise ValueError(f"recall undefined: class(es) {missing} absent from truth")
        present = np.asarray(sorted(int(c) for c in classes))
    recalls = {int(c): float(np.mean(predicted[truth == c] == c)) for c in present}
    score = float(np.mean(list(recalls.values())))
    return (score, recalls) if return_recalls else score


class KaplanMeierCensoring:
    """Product-limit estimate of the censoring survival function G(t) = P(C > t).

    Censorings are the "events" of this estimator. Calling the object gives the
    right-continuous value G(t); :meth:`left` gives the left limit G(t-).
    """

    def __init__(self, time, censored):
        time = np.asarray(time, dtype=float)
        censored = np.asarray(censored, dtype=bool)
        uniq = np.unique(time)
        surv = np.empty(uniq.size)
        g = 1.0
        for i, t in enumerate(uniq):
            at_risk = np.count_nonzero(time >= t)
            d = np.count_nonzero((time == t) & censored)
            if d:
                g *= 1.0 - d / at_risk
            surv[i] = g
        self.times = uniq
        self.survival = surv

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        pos = np.searchsorted(self.times, t, side="right")
        vals = np.concatenate([[1.0], self.survival])
        return vals[pos]

    def left(self, t):
        t = np.asarray(t, dtype=float)
        pos = np.searchsorted(self.times, t, side="left")
        vals = np.concatenate([[1.0], self.survival])
        return vals[pos]


def km_censoring(labels) -> KaplanMeierCensoring:
    time, event = as_survival_arrays(labels)
    if time.size == 0:
        raise ValueError("km_censoring needs at least one subject")
    return KaplanMeierCensoring(time, ~event)


def default_tau(labels) -> float:
    """Largest event time t with G(t-) > 0."""
    time, event = as_survival_arrays(labels)
    if not event.any():
        raise ValueError("no events, tau undefined")
    g = km_censoring((time, event))
    ok = event & (g.left(time) > 0)
    return float(time[ok].max())


def uno_cindex(risk, labels, tau: float | None = None) -> float:
    """Inverse-probability-of-censoring weighted concordance index.

    Pairs (i, j) with an event for i, ``t_i < tau`` and ``t_i < t_j`` are
    comparable and weighted by ``G(t_i-)^-2``; tied risks count one half.
    ``tau`` defaults to :func:`default_tau`; pass ``np.inf`` to admit every
    event time.
    """
    risk = np.asarray(risk, dtype=float)
    time, event = as_survival_arrays(labels)
    if risk.shape != time.shape:
        raise ValueError(f"{risk.size} risk scores but {time.size} labels")
    if tau is None:
        tau = default_tau((time, event))
    g = km_censoring((time, event)).left(time)
    use = event & (time < tau)
    num = den = 0.0
    for i in np.flatnonzero(use):
        comparable = time > time[i]
        if not comparable.any():
            continue
        if g[i] <= 0:
            raise ValueError(f"censoring survival is 0 at t={time[i]:g}; choose tau below {time[i]:g}")
        w = 1.0 / g[i] ** 2
        r = risk[comparable]
        num += w * (np.count_nonzero(risk[i] > r) + 0.5 * np.count_nonzero(risk[i] == r))
        den += w * np.count_nonzero(comparable)
    if den == 0:
        raise ValueError("no comparable pairs; c-index undefined")
    return num / den
