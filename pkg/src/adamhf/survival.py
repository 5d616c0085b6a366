"""Censored discrete-time losses, concordance, Kaplan-Meier and log-rank.

Censoring convention throughout: ``c = 1`` means censored, ``c = 0`` means the
event was observed in bin ``t``. Bins are 1-based.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fusion import HAZARD_EPS, RiskOutput
from .numerics import ContractError, Tensor, abs_, clip, log


@dataclass
class LossBreakdown:
    l_surv: float
    l_align: float
    lam: float

    @property
    def total(self) -> float:
        return self.l_surv + self.lam * self.l_align


def nll_loss(out: RiskOutput, t: int, c: int) -> Tensor:
    """-c log f_s(t) - (1-c) log f_s(t-1) - (1-c) log f_h(t), with f_s(0) = 1."""
    T = out.hazards.shape[0]
    if not 1 <= t <= T:
        raise ContractError(f"time bin {t} outside [1, {T}]")
    if c not in (0, 1):
        raise ContractError(f"censor flag must be 0 or 1, got {c}")
    if c == 1:
        return -log(out.survival[t - 1])
    h = clip(out.hazards[t - 1], HAZARD_EPS, 1.0 - HAZARD_EPS)
    loss = -log(h)
    if t > 1:
        loss = loss - log(out.survival[t - 2])
    return loss


def align_loss(x_p_cls: Tensor, x_g_cls: Tensor) -> Tensor:
    """Mean absolute difference between the two class tokens."""
    if x_p_cls.data.size != x_g_cls.data.size:
        raise ContractError(f"align_loss length mismatch: {x_p_cls.shape} vs {x_g_cls.shape}")
    return abs_(x_p_cls.reshape(-1) - x_g_cls.reshape(-1)).mean()


# --------------------------------------------------------------------------
# concordance


def c_index_paper(predicted_time: Sequence[float], censored: Sequence[int]) -> float:
    """(1/(n(n-1))) * sum_{i,j} I(T_i < T_j) (1 - c_j), on predicted times T.

    Implemented literally; it never looks at observed event times.
    """
    T = np.asarray(predicted_time, dtype=np.float64)
    c = np.asarray(censored, dtype=np.float64)
    n = T.size
    if n < 2:
        raise ContractError("c_index_paper needs at least two samples")
    less = T[:, None] < T[None, :]
    return float((less * (1.0 - c)[None, :]).sum() / (n * (n - 1)))


def c_index_harrell(risk: Sequence[float], time: Sequence[int], censored: Sequence[int]) -> float | None:
    """Harrell's concordance; ``None`` when no pair is comparable.

    A pair is comparable when the earlier time is an observed event. It is
    concordant when that subject has the higher risk; risk ties count 1/2.
    """
    r = np.asarray(risk, dtype=np.float64)
    t = np.asarray(time, dtype=np.float64)
    event = np.asarray(censored) == 0
    comparable = (t[:, None] < t[None, :]) & event[:, None]
    n_comp = comparable.sum()
    if n_comp == 0:
        return None
    conc = (r[:, None] > r[None, :]) + 0.5 * (r[:, None] == r[None, :])
    return float((conc * comparable).sum() / n_comp)


# --------------------------------------------------------------------------
# Kaplan-Meier


@dataclass
class KMCurve:
    event_times: list[int]
    at_risk: list[int]
    survival: list[float]
    group: str = ""


def km_curve(time: Sequence[int], censored: Sequence[int], group: str = "") -> KMCurve:
    """Product-limit estimate on every observed bin; censored subjects stay at
    risk through their own bin."""
    t = np.asarray(time)
    c = np.asarray(censored)
    if t.size == 0:
        raise ContractError("km_curve needs a non-empty group")
    bins, inverse = np.unique(t, return_inverse=True)
    leaving = np.bincount(inverse, minlength=bins.size)
    deaths = np.bincount(inverse, weights=(c == 0).astype(float), minlength=bins.size)
    at_risk = t.size - np.concatenate([[0], np.cumsum(leaving)[:-1]])
    surv = np.cumprod(1.0 - deaths / at_risk)
    return KMCurve(bins.tolist(), at_risk.astype(int).tolist(), surv.tolist(), group)


# --------------------------------------------------------------------------
# log-rank


@dataclass
class LogRankResult:
    chi_square: float
    p_value: float


def gammaincc(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x).

    Series for x < a + 1, Lentz continued fraction otherwise.
    """
    if x < 0 or a <= 0:
        raise ValueError("gammaincc needs a > 0 and x >= 0")
    if x == 0:
        return 1.0
    lg = math.lgamma(a)
    if x < a + 1.0:
        term = total = 1.0 / a
        ap = a
        for _ in range(1000):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * 1e-16:
                break
        return 1.0 - total * math.exp(-x + a * math.log(x) - lg)
    tiny = 1e-300
    b = x + 1.0 - a
    cf = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 1000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        cf = b + an / cf
        if abs(cf) < tiny:
            cf = tiny
        d = 1.0 / d
        delta = d * cf
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - lg) * h


def chi2_sf(stat: float, dof: int = 1) -> float:
    return gammaincc(dof / 2.0, stat / 2.0)


def log_rank(time_a, censored_a, time_b, censored_b) -> LogRankResult | None:
    """Two-group log-rank test; ``None`` when undefined (no events / zero variance)."""
    ta, ca = np.asarray(time_a), np.asarray(censored_a)
    tb, cb = np.asarray(time_b), np.asarray(censored_b)
    if ta.size == 0 or tb.size == 0:
        raise ContractError("log_rank needs two non-empty groups")
    event_bins = np.unique(np.concatenate([ta[ca == 0], tb[cb == 0]]))
    if event_bins.size == 0:
        return None
    o_minus_e = 0.0
    var = 0.0
    for u in event_bins:
        n_a = np.sum(ta >= u)
        n_b = np.sum(tb >= u)
        d_a = np.sum((ta == u) & (ca == 0))
        d = d_a + np.sum((tb == u) & (cb == 0))
        n = n_a + n_b
        o_minus_e += d_a - d * n_a / n
        if n > 1:
            var += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1)
    if var <= 0:
        return None
    stat = o_minus_e ** 2 / var
    return LogRankResult(float(stat), float(chi2_sf(stat)))


def median_split(risk: Sequence[float]) -> np.ndarray:
    """True for the high-risk group: risk strictly above the median."""
    r = np.asarray(risk, dtype=np.float64)
    return r > np.median(r)
