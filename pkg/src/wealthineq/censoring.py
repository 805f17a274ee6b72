"""Non-rectangular censoring regions: boxes intersected with monotone linear constraints.

Every constraint has the form ``offset + sum_l c_l g_l(W_l)  (>= | <=)  bound``
with ``c_l > 0`` on the components it involves and ``g_l`` the identity,
except for at most one clamped component where ``g_l(W) = min(W, C)``.
All terms are nondecreasing in every component, so fixing all components but
one leaves a single interval for the free one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .domain import (
    DWELLING, FINANCIAL, N_COMPONENTS, OTHER_REAL_ESTATE, PROFESSIONAL, REMAINDER,
    Household, RunConfig,
)

GE, LE = ">=", "<="

log = logging.getLogger(__name__)

TIGHTEN_TOL = 1e-6
# nearly parallel GE/LE pairs make propagation zig-zag with a contraction ratio
# close to 1; the cap only bounds the work on pathological inputs
TIGHTEN_MAX_ROUNDS = 100_000
FEASIBLE_MAX_ROUNDS = 100
# a point counts as feasible when no slack is below -FEASIBLE_RTOL * max(total, 1);
# equality pairs can pin a component where no float satisfies both sides exactly
FEASIBLE_RTOL = 1e-9
# outward relaxation of propagated bounds, relative to the magnitude of the terms
_ROUND_SLACK = 1e-13


class InfeasibleError(ValueError):
    """A censoring region is empty.

    ``component`` is the component whose box emptied (None when a constraint
    cannot be met by any box point) and ``constraints`` the descriptions of the
    constraints that produced the crossing bounds.
    """

    def __init__(self, message: str, component: Optional[int] = None,
                 constraints: Sequence[str] = (), slack: float = math.nan):
        super().__init__(message)
        self.component = component
        self.constraints = tuple(constraints)
        self.slack = slack


@dataclass(frozen=True)
class LinearConstraint:
    coefficients: tuple[float, ...]
    offset: float
    sense: str
    bound: float
    clamp: Optional[tuple[int, float]] = None
    name: str = ""

    def __post_init__(self):
        if self.sense not in (GE, LE):
            raise ValueError(f"sense must be '>=' or '<=', got {self.sense!r}")
        if len(self.coefficients) != N_COMPONENTS:
            raise ValueError("one coefficient per component required")
        if any(c < 0 for c in self.coefficients):
            raise ValueError("coefficients must be nonnegative")
        if self.clamp is not None and self.coefficients[self.clamp[0]] <= 0:
            raise ValueError("clamped component must carry a positive coefficient")

    def term(self, l: int, w: float) -> float:
        c = self.coefficients[l]
        if c == 0:
            return 0.0
        if self.clamp is not None and self.clamp[0] == l:
            w = min(w, self.clamp[1])
        return c * w

    def value(self, w: Sequence[float]) -> float:
        return self.offset + sum(self.term(l, w[l]) for l in range(N_COMPONENTS))

    def slack(self, w: Sequence[float]) -> float:
        v = self.value(w)
        return v - self.bound if self.sense == GE else self.bound - v

    def describe(self) -> str:
        if self.name:
            return self.name
        terms = []
        for l, c in enumerate(self.coefficients):
            if c:
                x = f"W{l + 1}" if not (self.clamp and self.clamp[0] == l) else f"min(W{l + 1},{self.clamp[1]:g})"
                terms.append(x if c == 1 else f"{c:g}*{x}")
        lhs = " + ".join(terms) + (f" + {self.offset:g}" if self.offset else "")
        return f"{lhs} {self.sense} {self.bound:g}"


@dataclass(frozen=True)
class ConstraintSet:
    owned: tuple[bool, ...]
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    linear: tuple[LinearConstraint, ...] = ()
    tightened: bool = field(default=False, compare=False)

    def box(self, l: int) -> tuple[float, float]:
        return self.lo[l], self.hi[l]

    def satisfied(self, w: Sequence[float], tol: float = 0.0) -> bool:
        return min_slack(self, w) >= -tol


def min_slack(c: ConstraintSet, w: Sequence[float]) -> float:
    """Smallest slack over boxes and linear constraints (negative = violated)."""
    s = math.inf
    for l in range(N_COMPONENTS):
        if c.owned[l]:
            s = min(s, w[l] - c.lo[l], c.hi[l] - w[l])
    for lc in c.linear:
        s = min(s, lc.slack(w))
    return s


def _close_enough(c: ConstraintSet, w: np.ndarray) -> bool:
    return min_slack(c, w) >= -FEASIBLE_RTOL * max(float(np.sum(w)), 1.0)


def _coef(*pairs: tuple[int, float]) -> tuple[float, ...]:
    out = [0.0] * N_COMPONENTS
    for l, v in pairs:
        out[l] = v
    return tuple(out)


def build_constraints(h: Household, cfg: Optional[RunConfig] = None) -> ConstraintSet:
    """Censoring region of one household (not yet tightened)."""
    cfg = cfg or RunConfig(T=1, B=0)
    owned = h.pattern.owned
    ones = tuple(1.0 if o else 0.0 for o in owned)
    lo, hi = [0.0] * N_COMPONENTS, [0.0] * N_COMPONENTS
    for l in range(N_COMPONENTS):
        if owned[l]:
            a, b = h.component_brackets[l]
            lo[l], hi[l] = max(float(a), 0.0), min(float(b), h.cap)

    lin: list[LinearConstraint] = []
    tlo, thi = h.total_bracket
    if tlo > 0:
        lin.append(LinearConstraint(ones, 0.0, GE, float(tlo), name=f"total >= {tlo:g}"))
    if math.isfinite(thi) and thi < h.cap:
        lin.append(LinearConstraint(ones, 0.0, LE, float(thi), name=f"total <= {thi:g}"))
    if h.financial_sum_bracket is not None:
        fc = _coef(*((l, 1.0) for l in h.financial_sum_components))
        flo, fhi = h.financial_sum_bracket
        if flo > 0:
            lin.append(LinearConstraint(fc, 0.0, GE, float(flo), name=f"financial sum >= {flo:g}"))
        if math.isfinite(fhi):
            lin.append(LinearConstraint(fc, 0.0, LE, float(fhi), name=f"financial sum <= {fhi:g}"))

    rebate = cfg.dwelling_rebate
    thr = cfg.tax_threshold
    if h.pays_wealth_tax is True:
        pairs = [(FINANCIAL, 1.0), (REMAINDER, 1.0)]
        if owned[DWELLING]:
            pairs.append((DWELLING, rebate))
        if owned[OTHER_REAL_ESTATE]:
            pairs.append((OTHER_REAL_ESTATE, 1.0))
        clamp = None
        offset = -h.debt
        if owned[PROFESSIONAL]:
            if h.nded_max > 0:
                pairs.append((PROFESSIONAL, 1.0))
                clamp = (PROFESSIONAL, float(h.nded_max))
        lin.append(LinearConstraint(_coef(*pairs), offset, GE, thr, clamp=clamp,
                                    name=f"taxable wealth upper bound >= {thr:g} (pays tax)"))
    elif h.pays_wealth_tax is False:
        pairs = [(FINANCIAL, 1.0)]
        if owned[DWELLING]:
            pairs.append((DWELLING, rebate))
        if owned[OTHER_REAL_ESTATE]:
            pairs.append((OTHER_REAL_ESTATE, 1.0))
        offset = (h.nded_min if owned[PROFESSIONAL] else 0.0) - h.debt
        lin.append(LinearConstraint(_coef(*pairs), offset, LE, thr,
                                    name=f"taxable wealth lower bound <= {thr:g} (no tax)"))
    if math.isfinite(h.cap):
        lin.append(LinearConstraint(ones, 0.0, LE, float(h.cap), name=f"total <= cap {h.cap:g}"))
    return ConstraintSet(owned=tuple(owned), lo=tuple(lo), hi=tuple(hi), linear=tuple(lin))


def _g(lc: LinearConstraint, l: int, w: float) -> float:
    if lc.clamp is not None and lc.clamp[0] == l:
        return min(w, lc.clamp[1])
    return w


def _implied(lc: LinearConstraint, l: int, target: float, slack: float = 0.0) -> tuple[float, float]:
    """Set of W_l with ``c_l g_l(W_l)`` on the right side of `target` (already divided by c_l).

    `slack` widens the clamp comparisons outward, for rounding-tolerant propagation.
    """
    clamped = lc.clamp is not None and lc.clamp[0] == l
    if lc.sense == GE:
        if clamped and target - slack > lc.clamp[1]:
            return math.inf, -math.inf
        return target, math.inf
    if clamped and lc.clamp[1] <= target + slack:
        return -math.inf, math.inf
    return -math.inf, target


def tighten(c: ConstraintSet) -> ConstraintSet:
    """Shrink the boxes by interval propagation until no bound moves by more than 1e-6.

    A bound is only replaced when the propagated value improves it by more
    than the tolerance, so the result is an exact fixed point and
    ``tighten(tighten(c)) == tighten(c)``. Propagated bounds are relaxed
    outward by a few ulps of the constraint magnitude so rounding never
    excludes a feasible point.
    """
    lo, hi = list(c.lo), list(c.hi)
    owned = c.owned
    lo_src: list[str] = ["box"] * N_COMPONENTS
    hi_src: list[str] = ["box"] * N_COMPONENTS

    def fail(l, extra=None):
        names = [s for s in (lo_src[l], hi_src[l]) if s]
        if extra:
            names.append(extra)
        raise InfeasibleError(
            f"component {l + 1}: empty box [{lo[l]:g}, {hi[l]:g}] ({'; '.join(names)})",
            component=l, constraints=names, slack=hi[l] - lo[l],
        )

    for l in range(N_COMPONENTS):
        if owned[l] and lo[l] > hi[l]:
            fail(l)

    for _ in range(TIGHTEN_MAX_ROUNDS):
        changed = False
        for lc in c.linear:
            comps = [l for l in range(N_COMPONENTS) if owned[l] and lc.coefficients[l] > 0]
            if lc.sense == GE:
                ext = {l: lc.coefficients[l] * _g(lc, l, hi[l]) for l in comps}
            else:
                ext = {l: lc.coefficients[l] * _g(lc, l, lo[l]) for l in comps}
            total = lc.offset + sum(ext.values())
            scale = abs(lc.bound) + abs(lc.offset) + sum(abs(v) for v in ext.values() if math.isfinite(v))
            if lc.sense == GE and total < lc.bound - _ROUND_SLACK * scale:
                raise InfeasibleError(
                    f"{lc.describe()} unreachable within boxes",
                    constraints=[lc.describe()], slack=total - lc.bound,
                )
            if lc.sense == LE and total > lc.bound + _ROUND_SLACK * scale:
                raise InfeasibleError(
                    f"{lc.describe()} unreachable within boxes",
                    constraints=[lc.describe()], slack=lc.bound - total,
                )
            for l in comps:
                rest = total - ext[l] if math.isfinite(ext[l]) else lc.offset + sum(
                    v for k, v in ext.items() if k != l)
                if not math.isfinite(rest):
                    continue
                target = (lc.bound - rest) / lc.coefficients[l]
                slack = _ROUND_SLACK * scale / lc.coefficients[l]
                new_lo, new_hi = _implied(lc, l, target, slack)
                if new_lo == math.inf:
                    lo[l] = math.inf
                    lo_src[l] = lc.describe()
                    fail(l)
                if new_lo - slack > lo[l] + TIGHTEN_TOL:
                    lo[l] = new_lo - slack
                    lo_src[l] = lc.describe()
                    changed = True
                if new_hi + slack < hi[l] - TIGHTEN_TOL:
                    hi[l] = new_hi + slack
                    hi_src[l] = lc.describe()
                    changed = True
                if lo[l] > hi[l]:
                    if lo[l] - hi[l] <= TIGHTEN_TOL:
                        lo[l] = hi[l]
                    else:
                        fail(l)
        if not changed:
            break
    else:
        log.warning("propagation stopped after %d rounds before reaching a fixed point", TIGHTEN_MAX_ROUNDS)
    for l in range(N_COMPONENTS):
        if owned[l]:
            lo[l] = max(lo[l], 0.0)
    return replace(c, lo=tuple(lo), hi=tuple(hi), tightened=True)


def conditional_interval(c: ConstraintSet, l: int, others: Sequence[float]) -> tuple[float, float]:
    """Exact set of W_l values satisfying every constraint with the other components fixed.

    Returns ``(lo, hi)``; ``lo > hi`` signals an empty set.
    """
    lo, hi = c.lo[l], c.hi[l]
    for lc in c.linear:
        cl = lc.coefficients[l]
        if cl <= 0:
            continue
        rest = lc.offset + sum(lc.term(k, others[k]) for k in range(N_COMPONENTS) if k != l and c.owned[k])
        a, b = _implied(lc, l, (lc.bound - rest) / cl)
        lo, hi = max(lo, a), min(hi, b)
    return lo, hi


def feasible_point(c: ConstraintSet) -> np.ndarray:
    """A point of the region, by coordinatewise projection from the box midpoints.

    Falls back to a linear program (maximizing the smallest slack) if the
    projection has not converged after 100 rounds.
    """
    w = np.zeros(N_COMPONENTS)
    comps = [l for l in range(N_COMPONENTS) if c.owned[l]]
    for l in comps:
        if c.lo[l] > c.hi[l]:
            raise InfeasibleError(f"component {l + 1}: empty box", component=l)
        hi = c.hi[l] if math.isfinite(c.hi[l]) else max(2.0 * c.lo[l], c.lo[l] + 1.0)
        w[l] = 0.5 * (c.lo[l] + hi)
    for _ in range(FEASIBLE_MAX_ROUNDS):
        if _close_enough(c, w):
            return _off_zero(c, w)
        for l in comps:
            a, b = conditional_interval(c, l, w)
            if a <= b:
                if not math.isfinite(b):
                    b = max(2.0 * a, a + 1.0)
                w[l] = 0.5 * (a + b)
            elif a == math.inf:
                w[l] = c.hi[l]
            else:
                # no value works with the others fixed: move toward the violated side
                w[l] = min(max(0.5 * (a + b), c.lo[l]), c.hi[l])
    if _close_enough(c, w):
        return _off_zero(c, w)
    w = _lp_point(c)
    if not _close_enough(c, w):
        raise InfeasibleError("no feasible point found", constraints=[lc.describe() for lc in c.linear])
    return _off_zero(c, w)


def _off_zero(c: ConstraintSet, w: np.ndarray) -> np.ndarray:
    """Move owned components sitting at zero to their conditional midpoint (stays feasible)."""
    for l in range(N_COMPONENTS):
        if c.owned[l] and w[l] <= 0:
            a, b = conditional_interval(c, l, w)
            if a <= b:
                if not math.isfinite(b):
                    b = max(2.0 * a, a + 1.0)
                w[l] = 0.5 * (a + b)
    return w


def _lp_point(c: ConstraintSet) -> np.ndarray:
    """Point maximizing the smallest (capped) slack of a linear inner approximation."""
    comps = [l for l in range(N_COMPONENTS) if c.owned[l]]
    n = len(comps)
    rows, rhs = [], []
    for lc in c.linear:
        a = np.array([lc.coefficients[l] for l in comps])
        variants = [(a, lc.offset)]
        if lc.clamp is not None and lc.sense == GE:
            # min(W, C) >= t  <=>  W >= t and C >= t
            j = comps.index(lc.clamp[0])
            b = a.copy()
            b[j] = 0.0
            variants.append((b, lc.offset + lc.coefficients[lc.clamp[0]] * lc.clamp[1]))
        for coef, off in variants:
            if lc.sense == GE:  # coef.w + off - s >= bound
                rows.append(np.append(-coef, 1.0))
                rhs.append(off - lc.bound)
            else:
                rows.append(np.append(coef, 1.0))
                rhs.append(lc.bound - off)
    bounds = [(c.lo[l], c.hi[l] if math.isfinite(c.hi[l]) else None) for l in comps] + [(None, 1.0)]
    obj = np.zeros(n + 1)
    obj[-1] = -1.0
    res = linprog(obj, A_ub=np.array(rows) if rows else None, b_ub=np.array(rhs) if rhs else None,
                  bounds=bounds, method="highs")
    if res.status != 0 or res.x[-1] < 0:
        raise InfeasibleError("linear program found no feasible point",
                              constraints=[lc.describe() for lc in c.linear])
    w = np.zeros(N_COMPONENTS)
    w[comps] = res.x[:n]
    return w


# ---------------------------------------------------------------------------
# vectorized form used by the sampler
# ---------------------------------------------------------------------------

@dataclass
class ConstraintStack:
    """Struct-of-arrays view of many tightened constraint sets (rows = households).

    ``coef`` is (m, J, 5); ``clamp_idx`` is -1 where a constraint has no clamp.
    Padding constraints are inactive ``0 <= 0``.
    """

    lo: np.ndarray
    hi: np.ndarray
    coef: np.ndarray
    offset: np.ndarray
    bound: np.ndarray
    is_ge: np.ndarray
    clamp_idx: np.ndarray
    clamp_val: np.ndarray
    active: np.ndarray  # False on padding

    @classmethod
    def from_sets(cls, sets: Sequence[ConstraintSet]) -> "ConstraintStack":
        m = len(sets)
        J = max([len(s.linear) for s in sets] + [1])
        coef = np.zeros((m, J, N_COMPONENTS))
        offset = np.zeros((m, J))
        bound = np.zeros((m, J))
        is_ge = np.zeros((m, J), dtype=bool)
        clamp_idx = np.full((m, J), -1, dtype=int)
        clamp_val = np.full((m, J), np.inf)
        active = np.zeros((m, J), dtype=bool)
        for k, s in enumerate(sets):
            active[k, :len(s.linear)] = True
            for j, lc in enumerate(s.linear):
                coef[k, j] = [lc.coefficients[l] if s.owned[l] else 0.0 for l in range(N_COMPONENTS)]
                offset[k, j] = lc.offset
                bound[k, j] = lc.bound
                is_ge[k, j] = lc.sense == GE
                if lc.clamp is not None:
                    clamp_idx[k, j], clamp_val[k, j] = lc.clamp
        lo = np.array([s.lo for s in sets], dtype=float).reshape(m, N_COMPONENTS)
        hi = np.array([s.hi for s in sets], dtype=float).reshape(m, N_COMPONENTS)
        return cls(lo, hi, coef, offset, bound, is_ge, clamp_idx, clamp_val, active)

    def terms(self, rows: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Per-constraint, per-component contributions ``c_l g_l(W_l)``: (n, J, 5)."""
        g = np.broadcast_to(w[:, None, :], self.coef[rows].shape).copy()
        ci = self.clamp_idx[rows]
        r, j = np.nonzero(ci >= 0)
        if r.size:
            l = ci[r, j]
            g[r, j, l] = np.minimum(g[r, j, l], self.clamp_val[rows][r, j])
        return self.coef[rows] * g

    def conditional(self, l: int, rows: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized :func:`conditional_interval` for component `l` on `rows`; `w` is (n, 5)."""
        terms = self.terms(rows, w)
        terms[:, :, l] = 0.0
        rest = self.offset[rows] + terms.sum(axis=2)
        cl = self.coef[rows, :, l]
        involved = cl > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            target = np.where(involved, (self.bound[rows] - rest) / np.where(involved, cl, 1.0), 0.0)
        is_ge = self.is_ge[rows]
        clamped = self.clamp_idx[rows] == l
        cval = self.clamp_val[rows]
        lower = np.where(involved & is_ge, target, -np.inf)
        # min(W, C) >= t is empty once t exceeds C
        lower = np.where(involved & is_ge & clamped & (target > cval), np.inf, lower)
        upper = np.where(involved & ~is_ge, target, np.inf)
        # min(W, C) <= t holds everywhere once C <= t
        upper = np.where(involved & ~is_ge & clamped & (cval <= target), np.inf, upper)
        lo = np.maximum(self.lo[rows, l], lower.max(axis=1))
        hi = np.minimum(self.hi[rows, l], upper.min(axis=1))
        return lo, hi

    def view(self, l: int, rows: np.ndarray) -> "ComponentView":
        """Precomputed slice for repeated :meth:`conditional` calls on the same rows."""
        return ComponentView.build(self, l, rows)

    def min_slack(self, w: np.ndarray, owned: np.ndarray) -> np.ndarray:
        """Smallest slack per household for level values `w` (m, 5)."""
        rows = np.arange(w.shape[0])
        val = self.offset + self.terms(rows, w).sum(axis=2)
        slack = np.where(self.active, np.where(self.is_ge, val - self.bound, self.bound - val), np.inf)
        box = np.where(owned, np.minimum(w - self.lo, self.hi - w), np.inf)
        return np.minimum(slack.min(axis=1), box.min(axis=1))


@dataclass
class ComponentView:
    """Fixed-row, fixed-component slice of a :class:`ConstraintStack`."""

    l: int
    coef_rest: np.ndarray  # (n, J, 5) with column l zeroed
    offset: np.ndarray
    inv_cl: np.ndarray  # 1 / c_l where involved, else 0
    ge: np.ndarray  # involved & >=
    le: np.ndarray  # involved & <=
    ge_clamp: np.ndarray  # (>=) constraints clamping l itself
    le_clamp: np.ndarray
    cval: np.ndarray
    bound: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray
    other_clamps: tuple  # (r, j, component, coef, C) for clamps on other components

    @classmethod
    def build(cls, st: ConstraintStack, l: int, rows: np.ndarray) -> "ComponentView":
        coef = st.coef[rows].copy()
        cl = coef[:, :, l].copy()
        coef[:, :, l] = 0.0
        involved = cl > 0
        is_ge = st.is_ge[rows]
        ci = st.clamp_idx[rows]
        cval = st.clamp_val[rows]
        r, j = np.nonzero((ci >= 0) & (ci != l))
        c = ci[r, j]
        return cls(
            l=l, coef_rest=coef, offset=st.offset[rows],
            inv_cl=np.where(involved, 1.0 / np.where(involved, cl, 1.0), 0.0),
            ge=involved & is_ge, le=involved & ~is_ge,
            ge_clamp=involved & is_ge & (ci == l), le_clamp=involved & ~is_ge & (ci == l),
            cval=cval, bound=st.bound[rows],
            box_lo=st.lo[rows, l], box_hi=st.hi[rows, l],
            other_clamps=(r, j, c, coef[r, j, c], cval[r, j]),
        )

    def conditional(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rest = self.offset + np.einsum("njl,nl->nj", self.coef_rest, w)
        r, j, c, a, C = self.other_clamps
        if r.size:
            x = w[r, c]
            np.add.at(rest, (r, j), a * (np.minimum(x, C) - x))
        target = (self.bound - rest) * self.inv_cl
        lower = np.where(self.ge, target, -np.inf)
        lower[self.ge_clamp & (target > self.cval)] = np.inf
        upper = np.where(self.le, target, np.inf)
        upper[self.le_clamp & (self.cval <= target)] = np.inf
        lo = np.maximum(self.box_lo, lower.max(axis=1))
        hi = np.minimum(self.box_hi, upper.min(axis=1))
        return lo, hi
