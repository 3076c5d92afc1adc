"""Rank-based tests used to compare ablation options across folds."""

from __future__ import annotations

import enum
import itertools
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import stats as sps

ALPHA = 0.05
EXACT_MAX_N = 20


class TestKind(str, enum.Enum):
    MannWhitneyU = "MannWhitneyU"
    KruskalWallis = "KruskalWallis"
    DunnPosthoc = "DunnPosthoc"


@dataclass(frozen=True)
class StatResult:
    test: TestKind
    groups: tuple[str, ...]
    statistic: float
    p_value: float
    corrected: bool = False
    raw_p: float | None = None
    method: str = ""

    @property
    def significant(self) -> bool:
        return self.p_value < ALPHA

    def to_dict(self) -> dict:
        d = asdict(self)
        d["test"] = self.test.value
        d["groups"] = list(self.groups)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StatResult":
        return cls(
            test=TestKind(d["test"]),
            groups=tuple(d["groups"]),
            statistic=float(d["statistic"]),
            p_value=float(d["p_value"]),
            corrected=bool(d.get("corrected", False)),
            raw_p=d.get("raw_p"),
            method=d.get("method", ""),
        )


def _tie_term(ranked_values: np.ndarray) -> float:
    _, t = np.unique(ranked_values, return_counts=True)
    return float((t**3 - t).sum())


def _names(groups, names):
    if names is None:
        return tuple(f"group{i}" for i in range(len(groups)))
    if len(names) != len(groups):
        raise ValueError("one name per group is required")
    return tuple(str(n) for n in names)


def _exact_rank_sum_cdf(doubled_ranks: np.ndarray, k: int) -> dict[int, int]:
    """Number of size-``k`` subsets per (doubled) rank sum."""
    total = int(doubled_ranks.sum())
    dp = np.zeros((k + 1, total + 1), dtype=np.float64)
    dp[0, 0] = 1.0
    for r in doubled_ranks.astype(int):
        dp[1:, r:] = dp[1:, r:] + dp[:-1, : total + 1 - r]
    return dp[k]


def mann_whitney_u(a: Sequence[float], b: Sequence[float], names=("a", "b"), method: str = "auto") -> StatResult:
    """Two-sided Mann-Whitney U test; ``statistic`` is U for ``a``.

    ``method="auto"`` enumerates the exact permutation distribution of the rank
    sum (midranks for ties) when the pooled size is at most 20, and otherwise
    uses the tie-corrected normal approximation with continuity correction.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("both groups must be non-empty")
    na, nb = a.size, b.size
    n = na + nb
    ranks = sps.rankdata(np.r_[a, b])
    u = float(ranks[:na].sum() - na * (na + 1) / 2)
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "asymptotic"

    if method == "exact":
        doubled = np.rint(2 * ranks).astype(int)
        counts = _exact_rank_sum_cdf(doubled, na)
        observed = int(doubled[:na].sum())
        denom = counts.sum()
        lower = counts[: observed + 1].sum() / denom
        upper = counts[observed:].sum() / denom
        p = min(1.0, 2.0 * min(lower, upper))
    elif method == "asymptotic":
        mu = na * nb / 2.0
        var = na * nb / 12.0 * ((n + 1) - _tie_term(ranks) / (n * (n - 1)))
        if var <= 0:
            p = 1.0
        else:
            z = max(abs(u - mu) - 0.5, 0.0) / np.sqrt(var)
            p = min(1.0, 2.0 * sps.norm.sf(z))
    else:
        raise ValueError(f"unknown method {method!r}")
    return StatResult(TestKind.MannWhitneyU, tuple(names), u, float(p), method=method)


def kruskal_wallis(groups: Sequence[Sequence[float]], names=None) -> StatResult:
    """Kruskal-Wallis H with tie correction and a chi-square(k-1) p-value."""
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    arrays = [np.asarray(g, dtype=float) for g in groups]
    if any(g.size == 0 for g in arrays):
        raise ValueError("every group must be non-empty")
    pooled = np.concatenate(arrays)
    n = pooled.size
    ranks = sps.rankdata(pooled)
    correction = 1.0 - _tie_term(pooled) / (n**3 - n)
    label = _names(arrays, names)
    if correction <= 0:
        return StatResult(TestKind.KruskalWallis, label, 0.0, 1.0)
    h = 0.0
    start = 0
    for g in arrays:
        r = ranks[start : start + g.size]
        h += r.sum() ** 2 / g.size
        start += g.size
    h = (12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)) / correction
    h = max(h, 0.0)
    p = float(sps.chi2.sf(h, len(arrays) - 1))
    return StatResult(TestKind.KruskalWallis, label, float(h), p)


def dunn_posthoc(groups: Sequence[Sequence[float]], names=None) -> list[StatResult]:
    """Pairwise Dunn z-tests on mean ranks, Bonferroni-corrected and clamped to 1."""
    arrays = [np.asarray(g, dtype=float) for g in groups]
    label = _names(arrays, names)
    pooled = np.concatenate(arrays)
    n = pooled.size
    ranks = sps.rankdata(pooled)
    bounds = np.cumsum([0] + [g.size for g in arrays])
    mean_ranks = [ranks[bounds[i] : bounds[i + 1]].mean() for i in range(len(arrays))]
    base_var = n * (n + 1) / 12.0 - _tie_term(pooled) / (12.0 * (n - 1))
    pairs = list(itertools.combinations(range(len(arrays)), 2))
    out = []
    for i, j in pairs:
        se2 = base_var * (1.0 / arrays[i].size + 1.0 / arrays[j].size)
        diff = mean_ranks[i] - mean_ranks[j]
        if se2 <= 0:
            z, raw = 0.0, 1.0
        else:
            z = diff / np.sqrt(se2)
            raw = float(2.0 * sps.norm.sf(abs(z)))
        out.append(
            StatResult(
                TestKind.DunnPosthoc,
                (label[i], label[j]),
                float(z),
                min(1.0, raw * len(pairs)),
                corrected=True,
                raw_p=raw,
                method="bonferroni",
            )
        )
    return out
