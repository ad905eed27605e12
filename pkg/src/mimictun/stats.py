"""Two-sample KS and chi-square homogeneity tests, and model comparison.

The comparison answers one question: could a candidate delay corpus have
been produced by the same timing model as a reference?  The delay
marginals are compared with a two-sample Kolmogorov-Smirnov test on a
random subsample of each corpus; then, state by state, the successor
counts of both corpora are compared with a chi-square test for
homogeneity.  The candidate is labeled with the reference bin map so the
states line up.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincc

from .errors import StatsDomainError
from .timing import TimingModel, label_stream, transition_counts

KS_COEFFICIENT = 1.36  # 95% critical value of the Kolmogorov distribution


def chi2_sf(x: float, df: int) -> float:
    """Upper tail P(X >= x) of the chi-square distribution with ``df`` degrees of freedom."""
    if x < 0 or df < 1:
        raise StatsDomainError(f"chi2_sf needs x >= 0 and df >= 1 (got x={x}, df={df})")
    if x == 0:
        return 1.0
    return min(1.0, max(0.0, float(gammaincc(df / 2.0, x / 2.0))))


def kolmogorov_sf(lam: float) -> float:
    """P(K > lam) for the limiting Kolmogorov distribution.

    Evaluates 2 * sum_{k>=1} (-1)^(k-1) exp(-2 k^2 lam^2) until terms drop
    below 1e-10.  The series converges too slowly near zero, where the
    probability is 1 to double precision anyway.
    """
    if lam < 0:
        raise StatsDomainError(f"lambda must be >= 0, got {lam}")
    if lam < 0.2:
        return 1.0
    total = 0.0
    k = 1
    while True:
        term = math.exp(-2.0 * k * k * lam * lam)
        total += term if k % 2 else -term
        if term < 1e-10:
            break
        k += 1
    return min(1.0, max(0.0, 2.0 * total))


def ks_threshold(n: int, m: int) -> float:
    return KS_COEFFICIENT * math.sqrt((n + m) / (n * m))


@dataclass(frozen=True)
class KSReport:
    d_statistic: float
    n: int
    m: int
    threshold: float
    p_value: float
    reject: bool
    reject_by_p: bool
    alpha: float = 0.05


def ks_statistic(a, b) -> float:
    """Largest gap between the two empirical CDFs, by a single merge pass."""
    x = sorted(a)
    y = sorted(b)
    n, m = len(x), len(y)
    i = j = 0
    best = 0.0
    while i < n and j < m:
        v = min(x[i], y[j])
        while i < n and x[i] == v:
            i += 1
        while j < m and y[j] == v:
            j += 1
        gap = abs(i / n - j / m)
        if gap > best:
            best = gap
    # once one sample is exhausted the remaining gaps only shrink toward 0
    return best


def ks_two_sample(a, b, alpha: float = 0.05) -> KSReport:
    """Two-sample Kolmogorov-Smirnov test.

    ``reject`` uses the closed-form 95% rule ``D > 1.36 sqrt((n+m)/(nm))``;
    the asymptotic p-value and its own decision are reported alongside.
    """
    a = list(a)
    b = list(b)
    n, m = len(a), len(b)
    if n < 1 or m < 1:
        raise StatsDomainError("both samples must be non-empty")
    d = ks_statistic(a, b)
    p = kolmogorov_sf(d * math.sqrt(n * m / (n + m)))
    thr = ks_threshold(n, m)
    return KSReport(d, n, m, thr, p, d > thr, p < alpha, alpha)


@dataclass(frozen=True)
class Chi2Report:
    statistic: float
    df: int
    p_value: float
    reject: bool
    alpha: float = 0.05
    dropped: tuple[int, ...] = ()


def chi2_homogeneity(counts_p1, counts_p2, alpha: float = 0.05) -> Chi2Report:
    """Chi-square test that two populations share one categorical distribution.

    Expected cell counts are row total x column total / grand total.
    Categories empty in both populations are dropped and the degrees of
    freedom reduced; with fewer than two categories left there is nothing
    to test and the report is statistic 0, df 0, p 1.
    """
    o = np.asarray([counts_p1, counts_p2], dtype=float)
    if o.ndim != 2 or o.shape[1] < 2:
        raise StatsDomainError("need two count vectors over the same >= 2 categories")
    if np.any(o < 0):
        raise StatsDomainError("counts must be non-negative")
    if o.sum() == 0:
        raise StatsDomainError("all counts are zero")
    if np.any(o.sum(axis=1) == 0):
        raise StatsDomainError("one population has no observations")
    col = o.sum(axis=0)
    keep = col > 0
    dropped = tuple(int(k) for k in np.flatnonzero(~keep))
    o = o[:, keep]
    if o.shape[1] < 2:
        return Chi2Report(0.0, 0, 1.0, False, alpha, dropped)
    n = o.sum()
    expected = np.outer(o.sum(axis=1), o.sum(axis=0)) / n
    stat = float(((o - expected) ** 2 / expected).sum())
    df = (2 - 1) * (o.shape[1] - 1)
    p = chi2_sf(stat, df)
    return Chi2Report(stat, df, p, p < alpha, alpha, dropped)


@dataclass(frozen=True)
class ModelComparison:
    ks: KSReport
    states: dict[str, Chi2Report | None]
    missing: tuple[str, ...] = field(default=())
    alpha: float = 0.05

    @property
    def overall_equivalent(self) -> bool:
        if self.ks.reject or self.missing:
            return False
        return not any(r.reject for r in self.states.values() if r is not None)

    def rows(self) -> list[dict]:
        """One record per state and one for KS, in report order."""
        out = []
        for s, r in self.states.items():
            if r is None:
                out.append({"test": "chi2", "state": f"{s}-{s}", "verdict": "missing"})
            else:
                out.append({
                    "test": "chi2", "state": f"{s}-{s}", "statistic": r.statistic, "df": r.df,
                    "p_value": r.p_value, "verdict": "reject" if r.reject else "fail-to-reject",
                })
        k = self.ks
        out.append({
            "test": "ks", "d": k.d_statistic, "n": k.n, "m": k.m, "threshold": k.threshold,
            "p_value": k.p_value, "verdict": "reject" if k.reject else "fail-to-reject",
            "p_rule_verdict": "reject" if k.reject_by_p else "fail-to-reject",
        })
        return out


def _subsample(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    if len(x) <= k:
        return x
    return rng.choice(x, size=k, replace=False)


def compare_models(
    reference: TimingModel,
    candidate,
    alpha: float = 0.05,
    ks_samples: int = 100,
    rng: np.random.Generator | int | None = None,
    reference_delays=None,
) -> ModelComparison:
    """Check a candidate delay sequence against a reference timing model.

    ``candidate`` is an ordered delay sequence (order matters for the
    transition counts).  The reference delays default to the model's
    pools, which hold the reference corpus; only their multiset is used.
    """
    if ks_samples < 30:
        raise StatsDomainError("ks_samples must be >= 30")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    cand = np.asarray(getattr(candidate, "delays", candidate), dtype=float)
    if cand.size < 2:
        raise StatsDomainError("candidate corpus needs at least two delays")
    if reference_delays is None:
        ref = np.concatenate([np.asarray(p, dtype=float) for p in reference.pools])
    else:
        ref = np.asarray(getattr(reference_delays, "delays", reference_delays), dtype=float)

    ks = ks_two_sample(_subsample(ref, ks_samples, rng), _subsample(cand, ks_samples, rng), alpha)

    labels = reference.labels
    ref_counts = np.asarray(reference.counts)
    cand_counts = transition_counts(label_stream(cand, reference.bin_map), labels)
    states: dict[str, Chi2Report | None] = {}
    missing = []
    for i, s in enumerate(labels):
        if cand_counts[i].sum() == 0 or ref_counts[i].sum() == 0:
            states[s] = None
            missing.append(s)
            continue
        states[s] = chi2_homogeneity(ref_counts[i], cand_counts[i], alpha)
    return ModelComparison(ks, states, tuple(missing), alpha)
