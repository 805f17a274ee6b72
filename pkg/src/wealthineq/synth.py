"""Synthetic finite populations with known truth, unequal-probability samples, and bracket censoring."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from . import samplers
from .domain import (
    DWELLING, FINANCIAL, N_COMPONENTS, N_PATTERNS, OTHER_REAL_ESTATE, PROFESSIONAL, REMAINDER,
    Household, owned_of, pattern_of,
)
from .indices import IndexSpec, WeightedSample, evaluate_index


def _default_covariates():
    return [
        {"name": "age", "dist": "normal", "mean": 0.0, "sd": 1.0},
        {"name": "income", "dist": "normal", "mean": 0.0, "sd": 1.0},
        {"name": "exec", "dist": "bernoulli", "p": 0.15},
    ]


def _default_components():
    return [
        {"covariates": ["income", "exec"], "slopes": [0.5, 0.6]},
        {"covariates": ["income", "age"], "slopes": [0.25, 0.1]},
        {"covariates": ["income", "age"], "slopes": [0.3, 0.2]},
        {"covariates": ["exec", "income"], "slopes": [0.8, 0.3]},
        {"covariates": ["income"], "slopes": [0.3]},
    ]


_BASE_INTERCEPT = (9.5, 11.9, 11.3, 11.0, 9.2)


def _default_intercepts():
    out = []
    for i in range(1, N_PATTERNS + 1):
        owned = owned_of(i)
        p = sum(owned)
        out.append([_BASE_INTERCEPT[l] + 0.15 * (p - 2) if owned[l] else None for l in range(N_COMPONENTS)])
    return out


def _default_brackets():
    return [
        {"kind": "geometric", "start": 500.0, "ratio": 1.5, "count": 24},
        {"kind": "geometric", "start": 25000.0, "ratio": 1.5, "count": 14},
        {"kind": "geometric", "start": 5000.0, "ratio": 1.5, "count": 18},
        {"kind": "geometric", "start": 2000.0, "ratio": 1.5, "count": 24},
        {"kind": "geometric", "start": 500.0, "ratio": 1.5, "count": 20},
    ]


@dataclass
class SynthConfig:
    """Population, design and observation scheme of one synthetic experiment.

    Bracket systems: ``{"kind": "geometric", "start", "ratio", "count"}``,
    ``{"kind": "thresholds", "values": [...]}``, ``{"kind": "exact"}`` (no
    censoring) or ``{"kind": "none"}`` (no bracket question). The top bracket
    of a threshold system is unbounded.
    """

    N: int = 5000
    m: int = 500
    seed: int = 0
    covariates: list = field(default_factory=_default_covariates)
    components: list = field(default_factory=_default_components)
    intercepts: list = field(default_factory=_default_intercepts)
    sd: list = field(default_factory=lambda: [1.4, 0.6, 1.0, 1.4, 1.0])
    correlation: float = 0.3
    covariances: Optional[dict] = None
    pattern_probs: list = field(default_factory=lambda: [0.16, 0.10, 0.10, 0.10, 0.20, 0.12, 0.12, 0.10])
    brackets: list = field(default_factory=_default_brackets)
    total_brackets: dict = field(default_factory=lambda: {
        "kind": "thresholds",
        "values": [15000.0, 30000.0, 60000.0, 100000.0, 150000.0, 225000.0, 300000.0, 450000.0],
    })
    tax_threshold: float = 720000.0
    dwelling_rebate: float = 0.8
    tax_known_fraction: float = 1.0
    nded_fraction: list = field(default_factory=lambda: [0.2, 0.7])
    debt_fraction_max: float = 0.3
    oversample: Optional[dict] = field(default_factory=lambda: {"covariate": "exec", "factor": 3.0})
    cap_levels: list = field(default_factory=lambda: [1.0e7, 5.0e7])

    def __post_init__(self):
        probs = np.asarray(self.pattern_probs, dtype=float)
        if probs.size != N_PATTERNS or np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("pattern_probs must be 8 nonnegative numbers summing to 1")
        if not (0 < self.m <= self.N):
            raise ValueError(f"need 0 < m <= N, got m={self.m}, N={self.N}")
        if len(self.components) != N_COMPONENTS or len(self.brackets) != N_COMPONENTS:
            raise ValueError("one component spec and one bracket system per component required")
        names = {c["name"] for c in self.covariates}
        for l, comp in enumerate(self.components):
            if len(comp["covariates"]) != len(comp["slopes"]):
                raise ValueError(f"component {l + 1}: covariates and slopes differ in length")
            missing = set(comp["covariates"]) - names
            if missing:
                raise ValueError(f"component {l + 1}: unknown covariates {sorted(missing)}")
        for sys in list(self.brackets) + [self.total_brackets]:
            th = thresholds(sys)
            if th is not None and np.any(np.diff(th) <= 0):
                raise ValueError("bracket thresholds must be strictly increasing")

    @property
    def covariate_names(self) -> list[str]:
        return [c["name"] for c in self.covariates]

    @property
    def slope_names(self) -> list[list[str]]:
        return [list(c["covariates"]) for c in self.components]

    def covariance(self, pattern_id: int) -> np.ndarray:
        if self.covariances and str(pattern_id) in self.covariances:
            return np.asarray(self.covariances[str(pattern_id)], dtype=float)
        comps = [l for l in range(N_COMPONENTS) if owned_of(pattern_id)[l]]
        sd = np.asarray(self.sd, dtype=float)[comps]
        corr = np.full((len(comps), len(comps)), self.correlation)
        np.fill_diagonal(corr, 1.0)
        return corr * np.outer(sd, sd)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        with open(path) as fh:
            d = json.load(fh)
        d.pop("run", None)
        return cls.from_dict(d)


def thresholds(system: dict) -> Optional[np.ndarray]:
    kind = system.get("kind", "thresholds")
    if kind == "geometric":
        return system["start"] * system["ratio"] ** np.arange(system["count"])
    if kind == "thresholds":
        return np.asarray(system["values"], dtype=float)
    if kind in ("exact", "none"):
        return None
    raise ValueError(f"unknown bracket system kind {kind!r}")


def bracket_of(value: float, system: dict) -> tuple[float, float]:
    """Bracket ``[lo, hi]`` of `value` under a bracket system (``hi`` may be +inf)."""
    kind = system.get("kind", "thresholds")
    if kind == "exact":
        return value, value
    if kind == "none":
        return 0.0, math.inf
    th = thresholds(system)
    j = int(np.searchsorted(th, value, side="right"))
    lo = 0.0 if j == 0 else float(th[j - 1])
    hi = math.inf if j == th.size else float(th[j])
    return lo, hi


@dataclass
class Population:
    pattern_ids: np.ndarray  # (N,)
    covariates: np.ndarray  # (N, n_cov)
    covariate_names: list[str]
    wealth: np.ndarray  # (N, 5), zero where not owned

    @property
    def N(self) -> int:
        return self.pattern_ids.size

    @property
    def totals(self) -> np.ndarray:
        return self.wealth.sum(axis=1)

    @property
    def owned(self) -> np.ndarray:
        return np.array([owned_of(i) for i in range(1, N_PATTERNS + 1)])[self.pattern_ids - 1]

    def design(self, cfg: SynthConfig, k: int, l: int) -> np.ndarray:
        """Covariate vector (constant first) of unit `k` for component `l`."""
        idx = [self.covariate_names.index(n) for n in cfg.components[l]["covariates"]]
        return np.concatenate(([1.0], self.covariates[k, idx]))


def generate_population(cfg: SynthConfig, rng: Optional[np.random.Generator] = None) -> Population:
    """Draw patterns, covariates, then log-wealth from N(x beta, Sigma_i) per unit."""
    rng = rng or samplers.rng_stream(cfg.seed, samplers.STREAM_POPULATION)
    N = cfg.N
    pids = rng.choice(np.arange(1, N_PATTERNS + 1), size=N, p=np.asarray(cfg.pattern_probs) / np.sum(cfg.pattern_probs))
    cov = np.empty((N, len(cfg.covariates)))
    for j, c in enumerate(cfg.covariates):
        if c["dist"] == "normal":
            cov[:, j] = rng.normal(c.get("mean", 0.0), c.get("sd", 1.0), N)
        elif c["dist"] == "bernoulli":
            cov[:, j] = (rng.random(N) < c["p"]).astype(float)
        elif c["dist"] == "uniform":
            cov[:, j] = rng.uniform(c.get("low", 0.0), c.get("high", 1.0), N)
        else:
            raise ValueError(f"unknown covariate distribution {c['dist']!r}")
    names = cfg.covariate_names
    mean = np.zeros((N, N_COMPONENTS))
    for l, comp in enumerate(cfg.components):
        idx = [names.index(n) for n in comp["covariates"]]
        mean[:, l] = cov[:, idx] @ np.asarray(comp["slopes"], dtype=float) if idx else 0.0
    wealth = np.zeros((N, N_COMPONENTS))
    for i in range(1, N_PATTERNS + 1):
        rows = np.nonzero(pids == i)[0]
        if rows.size == 0:
            continue
        comps = [l for l in range(N_COMPONENTS) if owned_of(i)[l]]
        icpt = np.array([cfg.intercepts[i - 1][l] for l in comps], dtype=float)
        L = np.linalg.cholesky(cfg.covariance(i))
        u = rng.standard_normal((rows.size, len(comps))) @ L.T
        logw = mean[np.ix_(rows, comps)] + icpt + u
        wealth[np.ix_(rows, comps)] = np.exp(logw)
    return Population(pids, cov, names, wealth)


def inclusion_probabilities(scores: np.ndarray, m: int) -> np.ndarray:
    """pi_k proportional to the score, summing to m, with units capped at certainty."""
    scores = np.asarray(scores, dtype=float)
    if np.any(scores <= 0) or not np.all(np.isfinite(scores)):
        raise ValueError("selection scores must be positive and finite")
    pi = np.zeros_like(scores)
    certain = np.zeros(scores.size, dtype=bool)
    while True:
        rest = m - certain.sum()
        free = ~certain
        pi[free] = rest * scores[free] / scores[free].sum()
        pi[certain] = 1.0
        over = free & (pi > 1.0)
        if not over.any():
            return pi
        certain |= over


def draw_sample(pop: Population, cfg: SynthConfig,
                rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, np.ndarray]:
    """Systematic PPS without replacement on oversampling scores.

    Returns the selected unit indices (sorted) and their inclusion probabilities.
    Scores depend only on covariates, so selection is exogenous.
    """
    rng = rng or samplers.rng_stream(cfg.seed, samplers.STREAM_SAMPLE)
    scores = np.ones(pop.N)
    if cfg.oversample:
        j = pop.covariate_names.index(cfg.oversample["covariate"])
        scores = np.where(pop.covariates[:, j] > 0, float(cfg.oversample["factor"]), 1.0)
    pi = inclusion_probabilities(scores, cfg.m)
    perm = rng.permutation(pop.N)
    cum = np.cumsum(pi[perm])
    points = rng.random() + np.arange(cfg.m)
    picked = perm[np.searchsorted(cum, points, side="right")]
    picked = np.unique(picked)
    if picked.size != cfg.m:
        raise RuntimeError(f"systematic draw selected {picked.size} distinct units, expected {cfg.m}")
    return picked, pi[picked]


@dataclass
class CensoredSample:
    households: list[Household]
    truth: np.ndarray  # (m, 5) true components
    units: np.ndarray  # population indices


def apply_censoring(pop: Population, units: np.ndarray, pi: np.ndarray, cfg: SynthConfig,
                    rng: Optional[np.random.Generator] = None) -> CensoredSample:
    """Replace true amounts by brackets and derive the tax flag from the true taxable wealth.

    NDED bounds are fractions of the professional-wealth bracket bounds and
    DEBT a fraction of the total-wealth lower bracket bound; both are then
    disclosed as known constants.
    """
    rng = rng or samplers.rng_stream(cfg.seed, samplers.STREAM_CENSORING)
    f_lo, f_hi = cfg.nded_fraction
    households = []
    for n, (k, p) in enumerate(zip(units, pi)):
        pid = int(pop.pattern_ids[k])
        owned = owned_of(pid)
        W = pop.wealth[k]
        total = float(W.sum())
        cap = next((c for c in cfg.cap_levels if total < c), 10.0 * total)
        brackets = []
        covs = []
        for l in range(N_COMPONENTS):
            if owned[l]:
                lo, hi = bracket_of(float(W[l]), cfg.brackets[l])
                brackets.append((lo, min(hi, cap)))
                covs.append(tuple(float(x) for x in pop.design(cfg, k, l)))
            else:
                brackets.append(None)
                covs.append(None)
        tlo, thi = bracket_of(total, cfg.total_brackets)
        thi = min(thi, cap)

        u_nded, u_debt, u_art, u_known = rng.random(4)
        nded_min = nded_max = 0.0
        nded_true = 0.0
        if owned[PROFESSIONAL]:
            plo, phi = brackets[PROFESSIONAL]
            nded_min, nded_max = f_lo * plo, f_hi * phi
            nded_true = (f_lo + (f_hi - f_lo) * u_nded) * W[PROFESSIONAL]
        debt = cfg.debt_fraction_max * u_debt * tlo
        taxable = (W[FINANCIAL] + cfg.dwelling_rebate * W[DWELLING] + W[OTHER_REAL_ESTATE]
                   + nded_true + u_art * W[REMAINDER] - debt)
        pays = bool(taxable > cfg.tax_threshold) if u_known < cfg.tax_known_fraction else None

        households.append(Household(
            id=f"h{k}",
            weight=float(1.0 / p),
            pattern=pattern_of(owned),
            covariates=tuple(covs),
            component_brackets=tuple(brackets),
            total_bracket=(tlo, thi),
            debt=float(debt),
            nded_min=float(nded_min),
            nded_max=float(nded_max),
            pays_wealth_tax=pays,
            cap=float(cap),
        ))
    return CensoredSample(households, pop.wealth[units].copy(), np.asarray(units))


def true_indices(pop: Population, specs: Sequence[IndexSpec]) -> dict[str, float]:
    """Indices of the whole finite population (unit weights): the ground truth."""
    s = WeightedSample(pop.totals)
    return {sp.label: evaluate_index(sp, s) for sp in specs}


def simulate(cfg: SynthConfig, seed: Optional[int] = None) -> tuple[Population, CensoredSample]:
    """Population, sample and censoring for one replication keyed by `seed`."""
    seed = cfg.seed if seed is None else seed
    pop = generate_population(cfg, samplers.rng_stream(seed, samplers.STREAM_POPULATION))
    units, pi = draw_sample(pop, cfg, samplers.rng_stream(seed, samplers.STREAM_SAMPLE))
    cs = apply_censoring(pop, units, pi, cfg, samplers.rng_stream(seed, samplers.STREAM_CENSORING))
    return pop, cs
