"""Sign-threshold confusion counts and the scores built on them.

A prediction or target strictly above zero reads as *late*; zero or below
reads as *timely*. Every ratio returns 0 on a zero denominator so grid
search never has to handle an exception.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricReport:
    f_tp: float
    f_tn: float
    ppv: float
    tpr: float
    mcc: float
    acc: float
    mae: float
    g: float

    def as_dict(self) -> dict:
        return asdict(self)


def _pair(predictions, targets):
    p = np.asarray(predictions, dtype=float).ravel()
    t = np.asarray(targets, dtype=float).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise ValueError("cannot score an empty prediction vector")
    return p, t


def confusion(predictions, targets) -> ConfusionCounts:
    p, t = _pair(predictions, targets)
    late_hat = p > 0
    late = t > 0
    tp = int(np.count_nonzero(late_hat & late))
    fp = int(np.count_nonzero(late_hat & ~late))
    fn = int(np.count_nonzero(~late_hat & late))
    return ConfusionCounts(tp=tp, fp=fp, tn=p.size - tp - fp - fn, fn=fn)


def _ratio(num, den) -> float:
    return num / den if den else 0.0


def f_tp(c: ConfusionCounts) -> float:
    """F1 with *late* as the positive class."""
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def f_tn(c: ConfusionCounts) -> float:
    """F1 with *timely* as the positive class."""
    return _ratio(2 * c.tn, 2 * c.tn + c.fp + c.fn)


def ppv(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp)


def tpr(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)


def acc(c: ConfusionCounts) -> float:
    return _ratio(c.tp + c.tn, c.total)


def mcc(c: ConfusionCounts) -> float:
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if den == 0:
        return 0.0
    # integer products stay exact before the single sqrt
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(den)


def mae_normalized(predictions, targets, y_max: float) -> float:
    if not y_max > 0:
        raise ValueError(f"y_max must be positive, got {y_max}")
    p, t = _pair(predictions, targets)
    return float(np.mean(np.abs(p - t)) / y_max)


def g_score(e: float, ftp: float, ftn: float) -> float:
    # not clamped: E > 1 must still rank below E = 1
    return ((1.0 - e) + ftp + ftn) / 3.0


def evaluate(predictions, targets, y_max: float) -> MetricReport:
    counts = confusion(predictions, targets)
    e = mae_normalized(predictions, targets, y_max)
    ftp, ftn = f_tp(counts), f_tn(counts)
    return MetricReport(
        f_tp=ftp,
        f_tn=ftn,
        ppv=ppv(counts),
        tpr=tpr(counts),
        mcc=mcc(counts),
        acc=acc(counts),
        mae=e,
        g=g_score(e, ftp, ftn),
    )
