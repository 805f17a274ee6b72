"""Data-augmentation Gibbs sampler over (theta, latent log-wealth, sampling error E).

One sweep updates, in order: the pattern covariance matrices, the stacked
coefficient vector (one joint block), the wealth components household by
household in ascending component order, and finally E. Households are
conditionally independent given theta, so the wealth block is carried out
component by component across all households at once; the draws are the same
conditionals as a household-major loop.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg

from . import samplers
from .censoring import ConstraintSet, ConstraintStack, InfeasibleError, build_constraints, feasible_point, tighten
from .domain import (
    COMPONENT_NAMES, N_COMPONENTS, N_PATTERNS, ChainState, Household, ParameterSet, RunConfig, owned_of,
)
from .indices import IndexSpec, VarianceProvider, WeightedSample, evaluate_many, linearized_variance, parse_index

log = logging.getLogger(__name__)

# an interval this narrow (relative) is treated as a point and the component is left in place
DEGENERATE_RTOL = 1e-9
# tolerated crossing of conditional bounds caused by rounding
CROSSING_RTOL = 1e-7
# residual spread below this many ulps of the log values counts as an exact fit
RESIDUAL_NOISE_ULPS = 1e3


class PreparationError(ValueError):
    pass


class InfeasibleData(PreparationError):
    """One or more households have an empty censoring region."""

    def __init__(self, failures: list[tuple[str, InfeasibleError]]):
        self.failures = failures
        ids = ", ".join(f for f, _ in failures[:5])
        more = f" (+{len(failures) - 5} more)" if len(failures) > 5 else ""
        super().__init__(f"{len(failures)} infeasible household(s): {ids}{more}")


class InvariantViolation(RuntimeError):
    pass


class SweepError(RuntimeError):
    def __init__(self, sweep: int, cause: Exception):
        self.sweep = sweep
        self.cause = cause
        super().__init__(f"sweep {sweep}: {cause}")


@dataclass
class Layout:
    """Column layout of the stacked coefficient vector: shared slopes, then intercepts."""

    slope_names: list[list[str]]
    intercept_keys: list[tuple[int, int]]

    def __post_init__(self):
        self.slope_slices = []
        pos = 0
        for names in self.slope_names:
            self.slope_slices.append(slice(pos, pos + len(names)))
            pos += len(names)
        self.n_slopes = pos
        self.intercept_index = {key: pos + j for j, key in enumerate(self.intercept_keys)}
        self.n_coef = pos + len(self.intercept_keys)

    @property
    def column_names(self) -> list[str]:
        cols = [f"x{l + 1}_{n}" for l, names in enumerate(self.slope_names) for n in names]
        cols += [f"intercept[p{i},{l + 1}]" for i, l in self.intercept_keys]
        return cols

    def unpack(self, beta: np.ndarray, sigmas: dict[int, np.ndarray]) -> ParameterSet:
        icpt = np.full((N_PATTERNS, N_COMPONENTS), np.nan)
        for (i, l), j in self.intercept_index.items():
            icpt[i - 1, l] = beta[j]
        return ParameterSet(
            slopes=tuple(beta[s].copy() for s in self.slope_slices),
            intercepts=icpt,
            covariances={k: v.copy() for k, v in sigmas.items()},
        )

    def pack(self, theta: ParameterSet) -> np.ndarray:
        beta = np.empty(self.n_coef)
        for s, v in zip(self.slope_slices, theta.slopes):
            beta[s] = v
        for (i, l), j in self.intercept_index.items():
            beta[j] = theta.intercepts[i - 1, l]
        return beta


@dataclass
class PatternGroup:
    pattern_id: int
    rows: np.ndarray
    comps: tuple[int, ...]
    X: np.ndarray  # (n, p, D)
    gram: np.ndarray  # (p*p, D*D): sum_k X_ka' X_kb, flattened

    @property
    def size(self) -> int:
        return self.rows.size


@dataclass
class PreparedData:
    households: list[Household]
    sets: list[ConstraintSet]
    stack: ConstraintStack
    owned: np.ndarray  # (m, 5) bool
    pattern_ids: np.ndarray  # (m,)
    weights: np.ndarray
    X: np.ndarray  # (m, 5, D), zero rows for unowned components
    layout: Layout
    groups: list[PatternGroup]
    owners: list[np.ndarray] = field(default_factory=list)  # rows owning each component
    views: list = field(default_factory=list)  # per-component constraint slices over `owners`

    @property
    def m(self) -> int:
        return len(self.households)

    def parameter_set(self, state: ChainState) -> ParameterSet:
        return self.layout.unpack(state.beta, state.sigmas)


def prepare(households: Sequence[Household], cfg: RunConfig,
            slope_names: Optional[list[list[str]]] = None) -> PreparedData:
    """Tighten every censoring region, check identifiability and stack the design.

    Raises :class:`InfeasibleData` listing every household whose region is
    empty, and :class:`PreparationError` when a pattern group is too small or
    the design is rank deficient.
    """
    households = list(households)
    if not households:
        raise PreparationError("no households")
    sets, failures = [], []
    for h in households:
        try:
            c = tighten(build_constraints(h, cfg))
            for l in h.pattern.components:
                if c.hi[l] <= 0:
                    raise InfeasibleError(f"owned component {l + 1} forced to zero", component=l)
            sets.append(c)
        except InfeasibleError as exc:
            failures.append((h.id, exc))
    if failures:
        raise InfeasibleData(failures)

    m = len(households)
    owned = np.array([h.pattern.owned for h in households], dtype=bool)
    pids = np.array([h.pattern.pattern_id for h in households], dtype=int)
    weights = np.array([h.weight for h in households], dtype=float)

    dims = [None] * N_COMPONENTS
    for h in households:
        for l in h.pattern.components:
            d = len(h.covariates[l])
            if dims[l] is None:
                dims[l] = d
            elif dims[l] != d:
                raise PreparationError(f"household {h.id}: covariate dimension {d} for component {l + 1}, "
                                       f"expected {dims[l]}")
    if slope_names is None:
        slope_names = [[f"c{j}" for j in range(1, (dims[l] or 1))] for l in range(N_COMPONENTS)]
    present = sorted(set(pids.tolist()))
    keys = [(i, l) for i in present for l in range(N_COMPONENTS) if owned_of(i)[l]]
    layout = Layout(slope_names=[list(s) for s in slope_names], intercept_keys=keys)
    for l in range(N_COMPONENTS):
        if dims[l] is not None and dims[l] - 1 != len(layout.slope_names[l]):
            raise PreparationError(f"component {l + 1}: {dims[l] - 1} slope columns but "
                                   f"{len(layout.slope_names[l])} names")

    D = layout.n_coef
    X = np.zeros((m, N_COMPONENTS, D))
    for k, h in enumerate(households):
        i = h.pattern.pattern_id
        for l in h.pattern.components:
            x = np.asarray(h.covariates[l], dtype=float)
            X[k, l, layout.slope_slices[l]] = x[1:]
            X[k, l, layout.intercept_index[(i, l)]] = x[0]

    groups = []
    for i in present:
        rows = np.nonzero(pids == i)[0]
        comps = tuple(l for l in range(N_COMPONENTS) if owned_of(i)[l])
        p = len(comps)
        if rows.size <= p:
            raise PreparationError(
                f"pattern group too small for proper posterior: pattern {i} has {rows.size} "
                f"household(s) for {p} components")
        Xg = X[rows][:, comps, :]
        gram = np.einsum("kad,kbe->abde", Xg, Xg).reshape(p * p, D * D)
        groups.append(PatternGroup(i, rows, comps, Xg, gram))

    rows_design = X.reshape(m * N_COMPONENTS, D)[owned.ravel()]
    _check_rank(rows_design, layout.column_names)

    stack = ConstraintStack.from_sets(sets)
    owners = [np.nonzero(owned[:, l])[0] for l in range(N_COMPONENTS)]
    views = [stack.view(l, owners[l]) for l in range(N_COMPONENTS)]
    return PreparedData(households, sets, stack, owned, pids, weights, X, layout, groups, owners, views)


def _check_rank(A: np.ndarray, names: list[str]) -> None:
    if A.shape[0] < A.shape[1]:
        raise PreparationError(f"design has {A.shape[0]} rows for {A.shape[1]} coefficients")
    _, R, piv = linalg.qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = max(A.shape) * np.finfo(float).eps * (d[0] if d.size else 0.0) * 1e3
    rank = int(np.sum(d > tol))
    if rank < A.shape[1]:
        bad = [names[j] for j in piv[rank:]]
        raise PreparationError(f"rank-deficient design; collinear column(s): {', '.join(bad)}")


# ---------------------------------------------------------------------------
# block updates
# ---------------------------------------------------------------------------

def _predicted(data: PreparedData, beta: np.ndarray) -> np.ndarray:
    m, L, D = data.X.shape
    return (data.X.reshape(m * L, D) @ beta).reshape(m, L)


def init_chain(data: PreparedData, rng: Optional[np.random.Generator] = None) -> ChainState:
    """Start from a feasible point per household; OLS coefficients; residual covariances.

    `rng` is accepted for interface symmetry; the start is deterministic.
    """
    W = np.zeros((data.m, N_COMPONENTS))
    for k, c in enumerate(data.sets):
        W[k] = feasible_point(c)
    W[~data.owned] = 0.0
    if np.any(W[data.owned] <= 0):
        raise InvariantViolation("feasible start has a nonpositive owned component")
    Y = np.zeros_like(W)
    Y[data.owned] = np.log(W[data.owned])

    m, L, D = data.X.shape
    A = data.X.reshape(m * L, D)[data.owned.ravel()]
    y = Y[data.owned]
    beta, *_ = np.linalg.lstsq(A, y, rcond=None)

    M = _predicted(data, beta)
    sigmas = {}
    for g in data.groups:
        U = (Y - M)[g.rows][:, g.comps]
        S = U.T @ U / g.size
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            S = S + 1e-6 * np.eye(len(g.comps))
        sigmas[g.pattern_id] = S
    return ChainState(beta=beta, sigmas=sigmas, latent=Y, wealth=W, error=0.0)


def update_covariances(state: ChainState, data: PreparedData, rng: np.random.Generator) -> ChainState:
    """Sigma_i ~ inverse-Wishart(n_i, sum_k u_k u_k') with u_k = log W_k - x_k beta."""
    M = _predicted(data, state.beta)
    R = state.latent - M
    for g in data.groups:
        U = R[g.rows][:, g.comps]
        S = U.T @ U
        # residuals at rounding level of the log values mean an exact fit
        noise = g.size * (RESIDUAL_NOISE_ULPS * np.finfo(float).eps * max(np.abs(state.latent[g.rows]).max(), 1.0)) ** 2
        if np.linalg.eigvalsh(S)[0] <= noise:
            raise InvariantViolation(
                f"pattern {g.pattern_id}: residual cross-product is singular (degenerate fit)")
        try:
            state.sigmas[g.pattern_id] = samplers.draw_inverse_wishart(rng, g.size, S)
        except samplers.NotPositiveDefiniteError as exc:
            raise InvariantViolation(
                f"pattern {g.pattern_id}: residual cross-product is singular (degenerate fit)") from exc
    return state


def coefficient_conditional(state: ChainState, data: PreparedData) -> tuple[np.ndarray, np.ndarray]:
    """Mean and lower Cholesky factor of the precision of the coefficient full conditional."""
    D = data.layout.n_coef
    prec = np.zeros(D * D)
    rhs = np.zeros(D)
    for g in data.groups:
        Sinv = np.linalg.inv(state.sigmas[g.pattern_id])
        Sinv = 0.5 * (Sinv + Sinv.T)
        prec += Sinv.ravel() @ g.gram
        Yg = state.latent[g.rows][:, g.comps]
        rhs += np.einsum("kad,ka->d", g.X, Yg @ Sinv)
    prec = prec.reshape(D, D)
    try:
        L = np.linalg.cholesky(0.5 * (prec + prec.T))
    except np.linalg.LinAlgError as exc:
        w = np.linalg.eigh(prec)[1][:, 0]
        col = data.layout.column_names[int(np.argmax(np.abs(w)))]
        raise InvariantViolation(f"singular coefficient precision near column {col}") from exc
    mean = linalg.cho_solve((L, True), rhs)
    return mean, L


def update_coefficients(state: ChainState, data: PreparedData, rng: np.random.Generator) -> ChainState:
    """Joint Gaussian draw of all slopes and intercepts (flat prior, GLS mean)."""
    mean, L = coefficient_conditional(state, data)
    z = rng.standard_normal(mean.size)
    state.beta = mean + linalg.solve_triangular(L.T, z, lower=False)
    return state


def _precision_tensor(state: ChainState, data: PreparedData) -> np.ndarray:
    Q = np.zeros((N_PATTERNS + 1, N_COMPONENTS, N_COMPONENTS))
    for g in data.groups:
        Qi = np.linalg.inv(state.sigmas[g.pattern_id])
        Q[g.pattern_id][np.ix_(g.comps, g.comps)] = 0.5 * (Qi + Qi.T)
    return Q[data.pattern_ids]


def update_wealth(state: ChainState, data: PreparedData, rng: np.random.Generator,
                  check: bool = False) -> ChainState:
    """Redraw every owned component from its truncated univariate normal conditional.

    The truncation interval of a component is recomputed from the household's
    constraint set with the other components at their current values.
    """
    M = _predicted(data, state.beta)
    Q = _precision_tensor(state, data)
    Y, W = state.latent, state.wealth
    R = Y - M
    for l in range(N_COMPONENTS):
        rows = data.owners[l]
        if rows.size == 0:
            continue
        Qr = Q[rows, l, :]
        qll = Qr[:, l]
        cross = np.einsum("kj,kj->k", Qr, R[rows]) - qll * R[rows, l]
        mean = M[rows, l] - cross / qll
        sd = 1.0 / np.sqrt(qll)

        lo, hi = data.views[l].conditional(W[rows])
        scale = np.maximum(np.maximum(np.abs(lo), np.abs(hi)), 1.0)
        crossing = lo - hi > CROSSING_RTOL * scale
        if crossing.any():
            k = rows[np.argmax(crossing)]
            raise InvariantViolation(
                f"household {data.households[k].id}: empty conditional interval for component {l + 1}")
        free = hi - lo > DEGENERATE_RTOL * scale
        if free.any():
            fr = rows[free]
            a, b = lo[free], hi[free]
            with np.errstate(divide="ignore"):
                la = np.log(a)
            z = samplers.truncated_normal(rng, mean[free], sd[free], la, np.log(b))
            w_new = np.clip(np.exp(z), a, b)
            W[fr, l] = w_new
            Y[fr, l] = np.log(w_new)
            R[fr, l] = Y[fr, l] - M[fr, l]
        if check:
            _assert_feasible(data, W)
    return state


def _assert_feasible(data: PreparedData, W: np.ndarray, rtol: float = 1e-9) -> None:
    slack = data.stack.min_slack(W, data.owned)
    scale = np.maximum(W.sum(axis=1), 1.0)
    bad = slack < -rtol * scale
    if bad.any():
        k = int(np.argmax(bad))
        raise InvariantViolation(f"household {data.households[k].id} left its region (slack {slack[k]:g})")


def update_error(state: ChainState, rng: np.random.Generator) -> ChainState:
    """E is independent of everything else, so its full conditional is N(0, 1)."""
    state.error = float(rng.standard_normal())
    return state


@dataclass
class SweepRecord:
    sweep: int
    values: dict[str, float]
    theta: Optional[ParameterSet] = None


def totals(state: ChainState) -> np.ndarray:
    return state.wealth.sum(axis=1)


def index_values(state: ChainState, data: PreparedData, specs: Sequence[IndexSpec],
                 variance: Optional[VarianceProvider] = linearized_variance) -> np.ndarray:
    """Realized quantities of interest: design estimate + sqrt(variance) * E."""
    s = WeightedSample(totals(state), data.weights)
    vals, var = evaluate_many(specs, s, variance)
    out = vals + np.sqrt(var) * state.error
    if not np.all(np.isfinite(out)):
        bad = [sp.label for sp, v in zip(specs, out) if not math.isfinite(v)]
        raise InvariantViolation(f"non-finite index value(s): {', '.join(bad)}")
    return out


def record_sweep(state: ChainState, data: PreparedData, specs: Sequence[IndexSpec], sweep: int = 0,
                 variance: Optional[VarianceProvider] = linearized_variance,
                 keep_theta: bool = False) -> SweepRecord:
    vals = index_values(state, data, specs, variance)
    return SweepRecord(
        sweep=sweep,
        values={sp.label: float(v) for sp, v in zip(specs, vals)},
        theta=data.parameter_set(state) if keep_theta else None,
    )


@dataclass
class ChainResult:
    specs: list[IndexSpec]
    series: np.ndarray  # (T, n_specs)
    seed: int
    elapsed: float
    theta_columns: Optional[list[str]] = None
    theta_trace: Optional[np.ndarray] = None

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.specs]

    def index_series(self, label: str) -> np.ndarray:
        return self.series[:, self.labels.index(label)]


def _theta_vector(state: ChainState, data: PreparedData) -> np.ndarray:
    parts = [state.beta]
    for g in data.groups:
        S = state.sigmas[g.pattern_id]
        parts.append(S[np.tril_indices(S.shape[0])])
    return np.concatenate(parts)


def theta_columns(data: PreparedData) -> list[str]:
    cols = list(data.layout.column_names)
    for g in data.groups:
        for a, b in zip(*np.tril_indices(len(g.comps))):
            cols.append(f"sigma[p{g.pattern_id},{g.comps[a] + 1},{g.comps[b] + 1}]")
    return cols


def run(data: PreparedData, cfg: RunConfig, specs: Optional[Sequence[IndexSpec]] = None,
        seed: Optional[int] = None, variance: Optional[VarianceProvider] = linearized_variance,
        check: bool = False, progress: Optional[Callable[[int, int], None]] = None) -> ChainResult:
    """Run T sweeps from :func:`init_chain` and return every sweep's index values.

    Burn-in is not dropped here. Each block draws from its own sub-stream of
    the seed so the chain is reproducible bit-for-bit.
    """
    seed = cfg.seed if seed is None else seed
    specs = list(specs) if specs is not None else [parse_index(n) for n in cfg.indices]
    streams = {k: samplers.rng_stream(seed, k) for k in (
        samplers.STREAM_INIT, samplers.STREAM_COVARIANCE, samplers.STREAM_COEFFICIENTS,
        samplers.STREAM_WEALTH, samplers.STREAM_ERROR)}
    t0 = time.perf_counter()
    state = init_chain(data, streams[samplers.STREAM_INIT])
    series = np.empty((cfg.T, len(specs)))
    trace = np.empty((cfg.T, len(theta_columns(data)))) if cfg.trace_theta else None
    stride = max(int(cfg.progress_stride), 1)
    for n in range(cfg.T):
        try:
            update_covariances(state, data, streams[samplers.STREAM_COVARIANCE])
            update_coefficients(state, data, streams[samplers.STREAM_COEFFICIENTS])
            update_wealth(state, data, streams[samplers.STREAM_WEALTH], check=check)
            update_error(state, streams[samplers.STREAM_ERROR])
            series[n] = index_values(state, data, specs, variance)
        except Exception as exc:
            raise SweepError(n + 1, exc) from exc
        if trace is not None:
            trace[n] = _theta_vector(state, data)
        if (n + 1) % stride == 0:
            log.info("sweep %d/%d (%.1fs)", n + 1, cfg.T, time.perf_counter() - t0)
            if progress is not None:
                progress(n + 1, cfg.T)
    return ChainResult(
        specs=specs, series=series, seed=seed, elapsed=time.perf_counter() - t0,
        theta_columns=theta_columns(data) if trace is not None else None, theta_trace=trace,
    )
