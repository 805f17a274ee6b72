"""Core data model: portfolio patterns, households, parameters, chain state, run configuration.

Wealth components are indexed 0..4 internally:

====  ===========================================
 0    financial wealth (always owned)
 1    principal dwelling
 2    other real estate
 3    professional wealth
 4    remainder: durables, art, jewelry (always owned)
====  ===========================================
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

N_COMPONENTS = 5
N_PATTERNS = 8
COMPONENT_NAMES = ("financial", "dwelling", "other_real_estate", "professional", "remainder")

FINANCIAL, DWELLING, OTHER_REAL_ESTATE, PROFESSIONAL, REMAINDER = range(N_COMPONENTS)

Interval = tuple[float, float]


class DomainError(ValueError):
    """Raised when a domain object violates one of its invariants."""


@dataclass(frozen=True)
class PortfolioPattern:
    owned: tuple[bool, bool, bool, bool, bool]
    pattern_id: int

    @property
    def size(self) -> int:
        return sum(self.owned)

    @property
    def components(self) -> tuple[int, ...]:
        """Owned component indices in canonical (ascending) order."""
        return tuple(l for l in range(N_COMPONENTS) if self.owned[l])


def pattern_of(owned: Sequence[bool]) -> PortfolioPattern:
    """Map an ownership vector to its canonical pattern.

    The id is one plus the binary number ``owned[1] owned[2] owned[3]``
    (dwelling as the most significant bit), so ``(T,F,F,F,T)`` is pattern 1
    and ``(T,T,T,T,T)`` is pattern 8.
    """
    owned = tuple(bool(x) for x in owned)
    if len(owned) != N_COMPONENTS:
        raise DomainError(f"ownership vector must have {N_COMPONENTS} entries, got {len(owned)}")
    if not (owned[FINANCIAL] and owned[REMAINDER]):
        raise DomainError("financial wealth and remainder must always be owned")
    pid = 1 + 4 * owned[DWELLING] + 2 * owned[OTHER_REAL_ESTATE] + owned[PROFESSIONAL]
    return PortfolioPattern(owned=owned, pattern_id=pid)


def owned_of(pattern_id: int) -> tuple[bool, ...]:
    if not 1 <= pattern_id <= N_PATTERNS:
        raise DomainError(f"pattern id must lie in 1..{N_PATTERNS}, got {pattern_id}")
    code = pattern_id - 1
    return (True, bool(code & 4), bool(code & 2), bool(code & 1), True)


ALL_PATTERNS = tuple(pattern_of(owned_of(i)) for i in range(1, N_PATTERNS + 1))


@dataclass(frozen=True)
class Household:
    """One sampled household.

    Brackets are ``(lower, upper)`` pairs in euros; ``math.inf`` marks an
    unbounded upper end. ``component_brackets`` and ``covariates`` hold
    ``None`` for components the household does not own. Each covariate
    vector starts with the constant 1.0.
    """

    id: str
    weight: float
    pattern: PortfolioPattern
    covariates: tuple[Optional[tuple[float, ...]], ...]
    component_brackets: tuple[Optional[Interval], ...]
    total_bracket: Interval = (0.0, math.inf)
    financial_sum_bracket: Optional[Interval] = None
    financial_sum_components: tuple[int, ...] = (FINANCIAL,)
    debt: float = 0.0
    nded_min: float = 0.0
    nded_max: float = 0.0
    pays_wealth_tax: Optional[bool] = None
    cap: float = 1.0e7


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self) -> str:
        return f"{self.field}: {self.rule}"


def _check_interval(name: str, iv, out: list[Violation]) -> None:
    lo, hi = iv
    if math.isnan(lo) or math.isnan(hi):
        out.append(Violation(name, "missing bound"))
    elif lo > hi:
        out.append(Violation(name, "inverted interval"))
    elif lo < 0:
        out.append(Violation(name, "negative lower bound"))


def validate_household(h: Household) -> list[Violation]:
    """Return every invariant violation of `h`; an empty list means well-formed."""
    out: list[Violation] = []
    if not (h.weight > 0) or not math.isfinite(h.weight):
        out.append(Violation("weight", "nonpositive weight"))
    owned = h.pattern.owned
    if not (owned[FINANCIAL] and owned[REMAINDER]):
        out.append(Violation("pattern", "financial wealth and remainder must be owned"))
    for l in range(N_COMPONENTS):
        br = h.component_brackets[l]
        if owned[l]:
            if br is None:
                out.append(Violation(f"bracket[{l + 1}]", "owned component without bracket"))
            else:
                _check_interval(f"bracket[{l + 1}]", br, out)
            cov = h.covariates[l]
            if cov is None or len(cov) == 0:
                out.append(Violation(f"covariates[{l + 1}]", "owned component without covariates"))
            elif any(not math.isfinite(v) for v in cov):
                out.append(Violation(f"covariates[{l + 1}]", "non-finite covariate"))
    _check_interval("total_bracket", h.total_bracket, out)
    if h.financial_sum_bracket is not None:
        _check_interval("financial_sum_bracket", h.financial_sum_bracket, out)
        if any(not owned[l] for l in h.financial_sum_components):
            out.append(Violation("financial_sum_components", "sum over a component not owned"))
    for name in ("debt", "nded_min", "nded_max"):
        v = getattr(h, name)
        if not (v >= 0) or not math.isfinite(v):
            out.append(Violation(name, "must be a nonnegative finite amount"))
    if h.nded_min > h.nded_max:
        out.append(Violation("nded_min", "nded_min exceeds nded_max"))
    if not (h.cap > 0):
        out.append(Violation("cap", "nonpositive cap"))
    return out


def validate_households(households: Sequence[Household]) -> dict[str, list[Violation]]:
    """Validate each record plus the cross-record covariate-dimension invariant."""
    report: dict[str, list[Violation]] = {}
    dims: dict[int, int] = {}
    for h in households:
        problems = validate_household(h)
        for l in h.pattern.components:
            cov = h.covariates[l]
            if cov is None:
                continue
            if dims.setdefault(l, len(cov)) != len(cov):
                problems.append(
                    Violation(f"covariates[{l + 1}]", f"dimension {len(cov)} differs from {dims[l]}")
                )
        if problems:
            report[h.id] = problems
    return report


@dataclass
class ParameterSet:
    """theta: shared slopes per component, pattern intercepts, pattern covariances.

    ``intercepts`` is an 8x5 array with NaN where the pattern does not own the
    component (or the pattern is absent from the data). ``covariances`` maps a
    pattern id to its p_i x p_i matrix over the owned components.
    """

    slopes: tuple[np.ndarray, ...]
    intercepts: np.ndarray
    covariances: dict[int, np.ndarray] = field(default_factory=dict)

    def n_free(self) -> int:
        n = sum(len(s) for s in self.slopes)
        n += int(np.sum(~np.isnan(self.intercepts)))
        n += sum(c.shape[0] * (c.shape[0] + 1) // 2 for c in self.covariances.values())
        return n

    def to_dict(self) -> dict:
        return {
            "slopes": [s.tolist() for s in self.slopes],
            "intercepts": [[None if math.isnan(v) else float(v) for v in row] for row in self.intercepts],
            "covariances": {str(k): v.tolist() for k, v in sorted(self.covariances.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterSet":
        slopes = tuple(np.asarray(s, dtype=float) for s in d["slopes"])
        icpt = np.array([[math.nan if v is None else v for v in row] for row in d["intercepts"]], dtype=float)
        covs = {int(k): np.asarray(v, dtype=float) for k, v in d["covariances"].items()}
        return cls(slopes=slopes, intercepts=icpt, covariances=covs)

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, s: str) -> "ParameterSet":
        return cls.from_dict(json.loads(s))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterSet):
            return NotImplemented
        return (
            len(self.slopes) == len(other.slopes)
            and all(np.array_equal(a, b) for a, b in zip(self.slopes, other.slopes))
            and np.array_equal(self.intercepts, other.intercepts, equal_nan=True)
            and self.covariances.keys() == other.covariances.keys()
            and all(np.array_equal(v, other.covariances[k]) for k, v in self.covariances.items())
        )


@dataclass
class ChainState:
    """One Gibbs state.

    The coefficient vector is kept stacked (shared slopes then intercepts, see
    :class:`wealthineq.gibbs.Layout`); ``latent`` holds log-euros with
    unowned entries set to 0 and ``wealth`` the matching level values with
    unowned entries set to 0.
    """

    beta: np.ndarray
    sigmas: dict[int, np.ndarray]
    latent: np.ndarray
    wealth: np.ndarray
    error: float = 0.0

    def copy(self) -> "ChainState":
        return ChainState(
            beta=self.beta.copy(),
            sigmas={k: v.copy() for k, v in self.sigmas.items()},
            latent=self.latent.copy(),
            wealth=self.wealth.copy(),
            error=self.error,
        )


STANDARD_INDEX_NAMES = (
    "Mean", "Median", "P99", "P95", "P90", "Q3", "Q1", "P10",
    "P95/D5", "P99/D5", "Q3/Q1", "D9/D1", "D9/D5",
    "Gini", "Theil", "Atkinson(1.5)", "Atkinson(2)",
)


@dataclass
class RunConfig:
    T: int = 20000
    B: int = 1000
    seed: int = 0
    tax_threshold: float = 720000.0
    dwelling_rebate: float = 0.8
    indices: list[str] = field(default_factory=lambda: list(STANDARD_INDEX_NAMES))
    alpha: float = 0.05
    batches: int = 20
    progress_stride: int = 1000
    trace_theta: bool = False

    def __post_init__(self):
        if not (0 <= self.B < self.T):
            raise DomainError(f"need 0 <= B < T, got B={self.B}, T={self.T}")
        if not (0 < self.alpha < 1):
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not (0 < self.dwelling_rebate <= 1):
            raise DomainError(f"dwelling_rebate must lie in (0, 1], got {self.dwelling_rebate}")
        if not (0 <= self.seed < 2**64):
            raise DomainError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DomainError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

