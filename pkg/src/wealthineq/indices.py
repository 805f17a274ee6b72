"""Design-weighted inequality indices and their linearized (plug-in) variances.

All indices take a :class:`WeightedSample` of positive values ``t`` and
positive design weights ``w``. The sample caches its sort order so that a
batch of indices evaluated on the same sweep shares the work.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

from .domain import STANDARD_INDEX_NAMES

# relative slack when comparing cumulative weights to p * sum(w)
_CUM_RTOL = 1e-12


class DegenerateSampleWarning(UserWarning):
    """Emitted when a variance cannot be estimated (e.g. zero density at a quantile)."""


@dataclass(frozen=True)
class IndexSpec:
    kind: str
    p: Optional[float] = None
    q: Optional[float] = None
    eps: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("mean", "quantile", "quantile_ratio", "gini", "theil", "atkinson"):
            raise ValueError(f"unknown index kind {self.kind!r}")
        for x in (self.p, self.q):
            if x is not None and not (0 < x < 1):
                raise ValueError(f"quantile level must lie in (0, 1), got {x}")
        if self.kind in ("quantile", "quantile_ratio") and self.p is None:
            raise ValueError("quantile index needs p")
        if self.kind == "quantile_ratio" and self.q is None:
            raise ValueError("quantile ratio needs q")
        if self.kind == "atkinson":
            if self.eps is None or not (self.eps > 0) or self.eps == 1:
                raise ValueError(f"Atkinson index needs eps > 0, eps != 1; got {self.eps}")

    @property
    def label(self) -> str:
        if self.kind == "mean":
            return "Mean"
        if self.kind == "gini":
            return "Gini"
        if self.kind == "theil":
            return "Theil"
        if self.kind == "atkinson":
            return f"Atkinson({self.eps:g})"
        if self.kind == "quantile":
            if self.p == 0.5:
                return "Median"
            return _quantile_name(self.p, deciles=False)
        return f"{_quantile_name(self.p, deciles=True)}/{_quantile_name(self.q, deciles=True)}"

    def __str__(self) -> str:
        return self.label


def _quantile_name(p: float, deciles: bool) -> str:
    if p == 0.25:
        return "Q1"
    if p == 0.75:
        return "Q3"
    pct = round(p * 100, 6)
    if deciles and pct % 10 == 0:
        return f"D{int(pct) // 10}"
    return f"P{pct:g}"


_QNAME = re.compile(r"^(P|D|Q)(\d+(?:\.\d+)?)$")


def _parse_quantile_name(s: str) -> float:
    s = s.strip()
    if s.lower() == "median":
        return 0.5
    m = _QNAME.match(s.upper())
    if not m:
        raise ValueError(f"cannot parse quantile name {s!r}")
    kind, num = m.group(1), float(m.group(2))
    scale = {"P": 100.0, "D": 10.0, "Q": 4.0}[kind]
    return num / scale


def parse_index(name: str) -> IndexSpec:
    """Parse an index name such as ``"Gini"``, ``"P99"``, ``"D9/D1"`` or ``"Atkinson(1.5)"``."""
    s = name.strip()
    low = s.lower()
    if low == "mean":
        return IndexSpec("mean")
    if low == "gini":
        return IndexSpec("gini")
    if low == "theil":
        return IndexSpec("theil")
    m = re.match(r"^atkinson\s*\(\s*(?:eps\s*=\s*)?([0-9.eE+-]+)\s*\)$", low)
    if m:
        return IndexSpec("atkinson", eps=float(m.group(1)))
    if "/" in s:
        a, b = s.split("/", 1)
        return IndexSpec("quantile_ratio", p=_parse_quantile_name(a), q=_parse_quantile_name(b))
    return IndexSpec("quantile", p=_parse_quantile_name(s))


STANDARD_INDICES = tuple(parse_index(n) for n in STANDARD_INDEX_NAMES)


class WeightedSample:
    """Positive values with positive design weights.

    Ties are ordered by input position (stable sort).
    """

    def __init__(self, values, weights=None):
        t = np.asarray(values, dtype=float).ravel()
        w = np.ones_like(t) if weights is None else np.asarray(weights, dtype=float).ravel()
        if t.size == 0:
            raise ValueError("empty sample")
        if t.shape != w.shape:
            raise ValueError(f"values and weights differ in length: {t.size} vs {w.size}")
        if not np.all(t > 0) or not np.all(np.isfinite(t)):
            raise ValueError("values must be positive and finite")
        if not np.all(w > 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be positive and finite")
        self.values = t
        self.weights = w
        self._quantiles: dict[float, float] = {}
        self._qz: dict[float, np.ndarray] = {}

    def __len__(self) -> int:
        return self.values.size

    @cached_property
    def order(self) -> np.ndarray:
        return np.argsort(self.values, kind="stable")

    @cached_property
    def sorted_values(self) -> np.ndarray:
        return self.values[self.order]

    @cached_property
    def sorted_weights(self) -> np.ndarray:
        return self.weights[self.order]

    @cached_property
    def cum_weights(self) -> np.ndarray:
        return np.cumsum(self.sorted_weights)

    @cached_property
    def total_weight(self) -> float:
        return float(self.cum_weights[-1])

    @cached_property
    def weighted_total(self) -> float:
        return float(np.dot(self.weights, self.values))

    @cached_property
    def mean(self) -> float:
        return self.weighted_total / self.total_weight

    @cached_property
    def _rank_pos(self) -> np.ndarray:
        pos = np.empty(len(self), dtype=int)
        pos[self.order] = np.arange(len(self))
        return pos

    @cached_property
    def cdf_at_values(self) -> np.ndarray:
        """F(t_k) = sum_j w_j 1{t_j <= t_k} / N, in input order.

        Tied values are ranked by input position, matching the Gini's own
        ranks, so the result is the limit of slightly separated values.
        """
        return self.cum_weights[self._rank_pos] / self.total_weight

    @cached_property
    def upper_mass_at_values(self) -> np.ndarray:
        """sum_j w_j t_j 1{t_j >= t_k} / N, in input order (ties ranked as in :attr:`cdf_at_values`)."""
        wt = self.sorted_weights * self.sorted_values
        tail = np.cumsum(wt[::-1])[::-1]
        return tail[self._rank_pos] / self.total_weight

    def quantile(self, p: float) -> float:
        q = self._quantiles.get(p)
        if q is None:
            if not (0 < p < 1):
                raise ValueError(f"quantile level must lie in (0, 1), got {p}")
            target = p * self.total_weight * (1.0 - _CUM_RTOL)
            idx = int(np.searchsorted(self.cum_weights, target, side="left"))
            q = float(self.sorted_values[min(idx, len(self) - 1)])
            self._quantiles[p] = q
        return q

    @cached_property
    def log_bandwidth(self) -> float:
        """Silverman's rule of thumb on log-values (weighted sd and IQR)."""
        y = np.log(self.values)
        w = self.weights
        mu = np.dot(w, y) / self.total_weight
        sd = math.sqrt(max(np.dot(w, (y - mu) ** 2) / self.total_weight, 0.0))
        iqr = math.log(self.quantile(0.75)) - math.log(self.quantile(0.25))
        spread = min(sd, iqr / 1.34) if iqr > 0 else sd
        return 0.9 * spread * len(self) ** (-0.2)

    def density(self, x: float) -> float:
        """Weighted Gaussian-kernel density of the values at `x` (fitted on logs, back-transformed)."""
        h = self.log_bandwidth
        if h <= 0 or x <= 0:
            return 0.0
        u = (math.log(x) - np.log(self.values)) / h
        f_log = np.dot(self.weights, np.exp(-0.5 * u * u)) / (h * math.sqrt(2 * math.pi) * self.total_weight)
        return float(f_log) / x


def weighted_mean(s: WeightedSample) -> float:
    return s.mean


def weighted_gini(s: WeightedSample) -> float:
    """Design-based Gini with the mid-rank correction ``2 R_k - w_k``.

    ``R_k`` is the cumulative weight up to and including unit k in ascending
    order. Reduces to ``sum((2r - 1) t) / (N sum t) - 1`` for unit weights
    and distinct values, and gives 0 on a constant sample.
    """
    ws, ts, cw = s.sorted_weights, s.sorted_values, s.cum_weights
    g = np.dot((2.0 * cw - ws) * ws, ts) / (s.total_weight * s.weighted_total) - 1.0
    return max(float(g), 0.0)


def weighted_quantile(s: WeightedSample, p: float) -> float:
    """Smallest sorted value whose cumulative weight reaches ``p * sum(w)``."""
    return s.quantile(p)


def theil(s: WeightedSample) -> float:
    r = s.values / s.mean
    return max(float(np.dot(s.weights, r * np.log(r)) / s.total_weight), 0.0)


def _check_eps(eps: float) -> None:
    if not (eps > 0) or eps == 1:
        raise ValueError(f"Atkinson index needs eps > 0 and eps != 1, got {eps}")


def atkinson(s: WeightedSample, eps: float) -> float:
    _check_eps(eps)
    r = s.values / s.mean  # scale out before the power to avoid overflow
    m = (np.dot(s.weights, r ** (1.0 - eps)) / s.total_weight) ** (1.0 / (1.0 - eps))
    return min(max(float(1.0 - m), 0.0), 1.0)


def evaluate_index(spec: IndexSpec, s: WeightedSample) -> float:
    kind = spec.kind
    if kind == "mean":
        return s.mean
    if kind == "gini":
        return weighted_gini(s)
    if kind == "theil":
        return theil(s)
    if kind == "atkinson":
        return atkinson(s, spec.eps)
    if kind == "quantile":
        return s.quantile(spec.p)
    denom = s.quantile(spec.q)
    if denom == 0:
        raise ZeroDivisionError(f"{spec.label}: denominator quantile is zero")
    return s.quantile(spec.p) / denom


# ---------------------------------------------------------------------------
# linearization
# ---------------------------------------------------------------------------

def _quantile_z(s: WeightedSample, p: float) -> Optional[np.ndarray]:
    if p in s._qz:
        return s._qz[p]
    q = s.quantile(p)
    f = s.density(q)
    if not (f > 0) or not math.isfinite(f):
        z = None
    else:
        z = -((s.values <= q).astype(float) - p) / (s.total_weight * f)
    s._qz[p] = z
    return z


def linearized_variable(spec: IndexSpec, s: WeightedSample) -> Optional[np.ndarray]:
    """Per-unit linearized variable z_k such that the index moves like sum_k w_k z_k.

    Returns None when the variable is undefined (zero density at a quantile).
    """
    t, N, Y = s.values, s.total_weight, s.weighted_total
    kind = spec.kind
    if kind == "mean":
        return (t - s.mean) / N
    if kind == "gini":
        g = weighted_gini(s)
        wtf = np.dot(s.weights * t, s.cdf_at_values)
        return (2.0 / Y) * (t * s.cdf_at_values + s.upper_mass_at_values - wtf / N - (g + 1.0) * t / 2.0)
    if kind == "theil":
        s1 = np.dot(s.weights, t * np.log(t))
        return t * np.log(t) / Y - s1 * t / Y**2 - t / Y + 1.0 / N
    if kind == "atkinson":
        eps = spec.eps
        r = t / s.mean
        rp = r ** (1.0 - eps)
        sa = np.dot(s.weights, rp)
        ratio = (sa / N) ** (1.0 / (1.0 - eps))  # equally-distributed equivalent over the mean
        dlog_ede = (rp / sa - 1.0 / N) / (1.0 - eps)
        dlog_mean = t / Y - 1.0 / N
        return -ratio * (dlog_ede - dlog_mean)
    if kind == "quantile":
        return _quantile_z(s, spec.p)
    za, zb = _quantile_z(s, spec.p), _quantile_z(s, spec.q)
    if za is None or zb is None:
        return None
    qa, qb = s.quantile(spec.p), s.quantile(spec.q)
    return (za - (qa / qb) * zb) / qb


def linearized_variance(spec: IndexSpec, s: WeightedSample) -> float:
    """With-replacement variance estimate of the linearized weighted total.

    ``m/(m-1) * sum_k (w_k z_k - mean_j w_j z_j)^2``. A quantile whose density
    estimate vanishes (e.g. a constant sample) yields 0 with a
    :class:`DegenerateSampleWarning`.
    """
    m = len(s)
    if m < 2:
        raise ValueError("linearized variance needs at least two units")
    z = linearized_variable(spec, s)
    if z is None:
        warnings.warn(f"{spec.label}: zero density at the quantile, variance set to 0", DegenerateSampleWarning)
        return 0.0
    u = s.weights * z
    u = u - u.mean()
    return float(m / (m - 1) * np.dot(u, u))


VarianceProvider = Callable[[IndexSpec, WeightedSample], float]


def evaluate_many(
    specs: Sequence[IndexSpec],
    s: WeightedSample,
    variance: Optional[VarianceProvider] = linearized_variance,
) -> tuple[np.ndarray, np.ndarray]:
    """Point values and variances of several indices on one sample."""
    vals = np.empty(len(specs))
    var = np.zeros(len(specs))
    for j, spec in enumerate(specs):
        vals[j] = evaluate_index(spec, s)
        if variance is not None:
            var[j] = variance(spec, s)
    return vals, var
