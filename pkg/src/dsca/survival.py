"""Discrete-time survival mathematics.

Hazards h(t) are per-bin conditional event probabilities; the survival
function is their complementary cumulative product S(t) = prod(1 - h(s))
for s <= t, with S(0) = 1. The scalar risk score is the negative average
of the survival probabilities over all bins, so higher means riskier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

HAZARD_EPS = 1e-7


class OutOfRangeHazard(ValueError):
    pass


class BadBin(ValueError):
    pass


class NoComparablePairs(ValueError):
    pass


class NoEvents(ValueError):
    pass


class DegenerateTimes(ValueError):
    pass


@dataclass
class HazardPrediction:
    """Per-bin hazards, the derived survival curve, and the scalar risk."""

    hazards: np.ndarray
    survival: np.ndarray
    risk: float

    @classmethod
    def from_hazards(cls, hazards):
        h = np.asarray(hazards, dtype=np.float64)
        s = survival_from_hazards(h)
        return cls(hazards=h, survival=s, risk=risk_score(s))


@dataclass
class TimeBins:
    n_t: int
    edges: np.ndarray  # n_t - 1 strictly ascending cut points


@dataclass
class KmCurve:
    """Product-limit estimate evaluated at the observed event times."""

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray


def survival_from_hazards(hazards):
    """S(t) = prod_{s<=t} (1 - h(s)), with the S(0) = 1 convention."""
    h = np.asarray(hazards, dtype=np.float64)
    if np.any(h < 0) or np.any(h > 1):
        raise OutOfRangeHazard(f"hazards outside [0, 1]: {h}")
    return np.cumprod(1.0 - h)


def risk_score(survival):
    """Negative average of the survival probabilities over all bins."""
    s = np.asarray(survival, dtype=np.float64)
    return float(-s.mean())


def nll_loss(hazards, t_bin, censor, alpha=0.0):
    """Negative log-likelihood contribution of one patient.

    Uncensored: -log(S(t-1) * h(t)). Censored: -(1 - alpha) * log(S(t)).
    Hazards are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    h = np.asarray(hazards, dtype=np.float64)
    n_t = h.shape[0]
    if not (1 <= t_bin <= n_t):
        raise BadBin(f"t_bin {t_bin} outside 1..{n_t}")
    h = np.clip(h, HAZARD_EPS, 1.0 - HAZARD_EPS)
    log_surv = np.log(1.0 - h)
    if censor:
        return float(-(1.0 - alpha) * log_surv[:t_bin].sum())
    return float(-(log_surv[:t_bin - 1].sum() + math.log(h[t_bin - 1])))


def concordance_index(risks, times, censors):
    """Fraction of comparable pairs ordered correctly by predicted risk.

    A pair (i, j) is comparable when patient i had the event (censor 0)
    and t_i < t_j. Risk ties count 0.5.
    """
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    c = np.asarray(censors, dtype=np.int64)
    if not (len(r) == len(t) == len(c)) or len(r) < 2:
        raise ValueError("need equal-length arrays with at least 2 patients")
    comparable = (c[:, None] == 0) & (t[:, None] < t[None, :])
    m = int(comparable.sum())
    if m == 0:
        raise NoComparablePairs("no comparable (uncensored earlier) pair")
    wins = (r[:, None] > r[None, :]) & comparable
    ties = (r[:, None] == r[None, :]) & comparable
    return float((wins.sum() + 0.5 * ties.sum()) / m)


def make_time_bins(times, censors, n_t):
    """Quantile bin edges fitted on uncensored event times.

    Falls back to all times when fewer than n_t uncensored times exist.
    Raises DegenerateTimes when the basis has fewer than n_t distinct
    values.
    """
    t = np.asarray(times, dtype=np.float64)
    c = np.asarray(censors, dtype=np.int64)
    basis = t[c == 0]
    if basis.shape[0] < n_t:
        basis = t
    if np.unique(basis).shape[0] < n_t:
        raise DegenerateTimes(f"need >= {n_t} distinct times to fit bins")
    qs = np.arange(1, n_t) / n_t
    edges = np.quantile(basis, qs)
    return TimeBins(n_t=n_t, edges=edges)


def assign_bin(time, bins):
    """Right-open interval lookup; returns a 1-based bin index, clamped."""
    idx = int(np.searchsorted(bins.edges, time, side="right"))
    return min(idx + 1, bins.n_t)


def kaplan_meier(times, events):
    """Product-limit estimator; events is 1 for an observed event.

    Censored subjects stay in the risk set through their recorded time
    and leave afterwards.
    """
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=np.int64)
    order = np.argsort(t, kind="stable")
    t, e = t[order], e[order]
    n_at_risk = t.shape[0]
    s = 1.0
    out_t, out_s, out_n, out_d = [], [], [], []
    for ut in np.unique(t):
        mask = t == ut
        d = int(e[mask].sum())
        if d > 0:
            s *= 1.0 - d / n_at_risk
            out_t.append(float(ut))
            out_s.append(s)
            out_n.append(n_at_risk)
            out_d.append(d)
        n_at_risk -= int(mask.sum())
    return KmCurve(
        times=np.asarray(out_t),
        survival=np.asarray(out_s),
        at_risk=np.asarray(out_n, dtype=np.int64),
        events=np.asarray(out_d, dtype=np.int64),
    )


def chi2_sf_1dof(x):
    """Survival function of the chi-square distribution with 1 dof."""
    if x < 0:
        raise ValueError("chi-square statistic must be >= 0")
    return math.erfc(math.sqrt(x / 2.0))


def logrank_test(times_a, events_a, times_b, events_b):
    """Two-group logrank test; returns (chi2, p).

    The statistic pools the observed-minus-expected group-A events over
    the shared risk sets at every distinct event time.
    """
    ta = np.asarray(times_a, dtype=np.float64)
    ea = np.asarray(events_a, dtype=np.int64)
    tb = np.asarray(times_b, dtype=np.float64)
    eb = np.asarray(events_b, dtype=np.int64)
    if ta.shape[0] == 0 or tb.shape[0] == 0:
        raise ValueError("both groups must be nonempty")
    if ea.sum() + eb.sum() == 0:
        raise NoEvents("no events in either group")
    event_times = np.unique(np.concatenate([ta[ea == 1], tb[eb == 1]]))
    o_minus_e = 0.0
    var = 0.0
    for t in event_times:
        n1 = int((ta >= t).sum())
        n2 = int((tb >= t).sum())
        n = n1 + n2
        d1 = int(((ta == t) & (ea == 1)).sum())
        d2 = int(((tb == t) & (eb == 1)).sum())
        d = d1 + d2
        if n == 0:
            continue
        o_minus_e += d1 - d * n1 / n
        if n > 1:
            var += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1)
    chi2 = (o_minus_e * o_minus_e / var) if var > 0 else 0.0
    p = min(chi2_sf_1dof(chi2), 1.0)
    return float(chi2), float(max(p, 1e-300))


def stratify_by_median(risks):
    """Indices of patients strictly above the median risk, and the rest."""
    r = np.asarray(risks, dtype=np.float64)
    if r.shape[0] < 2:
        raise ValueError("need at least 2 patients to stratify")
    med = float(np.median(r))
    high = np.nonzero(r > med)[0]
    low = np.nonzero(r <= med)[0]
    return high, low
