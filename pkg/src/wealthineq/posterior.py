"""Posterior predictions, equal-tail regions, running means and the report table."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

MIN_REGION_SAMPLES = 100
MIN_BATCHES = 10
# the two half means may differ by this many standard errors of their difference
STABILITY_Z = 3.0


class SeriesError(ValueError):
    pass


def _post_burn(series, B: int) -> np.ndarray:
    x = np.asarray(series, dtype=float).ravel()
    if B < 0:
        raise SeriesError("burn-in must be nonnegative")
    if B >= x.size:
        raise SeriesError(f"empty post-burn-in series (length {x.size}, burn-in {B})")
    return x[B:]


def posterior_mean(series, B: int = 0) -> float:
    """Ergodic mean of the draws after the first `B`."""
    return float(np.mean(_post_burn(series, B)))


def symmetric_region(series, B: int = 0, alpha: float = 0.05) -> tuple[float, float]:
    """Equal-tail region: empirical alpha/2 and 1-alpha/2 quantiles after burn-in.

    Quantiles interpolate linearly between order statistics (numpy's default rule).
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    x = _post_burn(series, B)
    if x.size < MIN_REGION_SAMPLES:
        raise SeriesError(f"too few samples for a region: {x.size} < {MIN_REGION_SAMPLES}")
    lo, hi = np.quantile(x, [alpha / 2, 1 - alpha / 2], method="linear")
    return float(lo), float(hi)


def running_mean_trace(series, B: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative means ``(n, mean of the first n post-burn-in draws)`` for n = 1..T-B."""
    x = np.asarray(series, dtype=float).ravel()[max(B, 0):]
    n = np.arange(1, x.size + 1)
    return n, np.cumsum(x) / n


@dataclass(frozen=True)
class BatchDiagnostic:
    mc_std_error: float
    stabilized: bool
    first_half_mean: float
    second_half_mean: float
    z: float


def batch_means_diagnostic(series, B: int = 0, batches: int = 20) -> BatchDiagnostic:
    """Batch-means Monte Carlo error and a half-versus-half stability check.

    The post-burn-in draws are cut into `batches` equal batches (a remainder
    at the front is dropped). The MC standard error of the overall mean is
    ``sd(batch means) / sqrt(batches)``. The series counts as stabilized when
    the means of the first and second halves of the batches differ by less
    than three standard errors of that difference, each half's error being
    estimated from the same batch-mean spread.
    """
    if batches < MIN_BATCHES:
        raise ValueError(f"need at least {MIN_BATCHES} batches, got {batches}")
    x = _post_burn(series, B)
    if x.size < batches:
        raise SeriesError(f"series of length {x.size} is shorter than {batches} batches")
    size = x.size // batches
    x = x[x.size - size * batches:]
    bm = x.reshape(batches, size).mean(axis=1)
    sd = float(np.std(bm, ddof=1))
    se = sd / math.sqrt(batches)
    h = batches // 2
    m1, m2 = float(bm[:h].mean()), float(bm[h:].mean())
    se_diff = sd * math.sqrt(1.0 / h + 1.0 / (batches - h))
    diff = abs(m1 - m2)
    if se_diff > 0:
        z = diff / se_diff
    else:
        z = 0.0 if diff <= 1e-12 * max(abs(m1), abs(m2), 1.0) else math.inf
    return BatchDiagnostic(se, z < STABILITY_Z, m1, m2, z)


@dataclass(frozen=True)
class PosteriorSummary:
    name: str
    prediction: float
    lower: float
    upper: float
    n_used: int

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ValueError(f"{self.name}: region bounds out of order")


def summarize(name: str, series, B: int = 0, alpha: float = 0.05) -> PosteriorSummary:
    x = _post_burn(series, B)
    lo, hi = symmetric_region(x, 0, alpha)
    return PosteriorSummary(name, float(np.mean(x)), lo, hi, int(x.size))


def pool_chains(chains: Sequence[np.ndarray], B: int) -> np.ndarray:
    """Concatenate several chains after dropping each one's burn-in."""
    return np.concatenate([_post_burn(c, B) for c in chains])


REPORT_HEADER = ("index", "prediction", "lower", "upper")


def build_report(summaries: Iterable[PosteriorSummary]) -> list[tuple[str, float, float, float]]:
    """Rows ``(index, prediction, lower, upper)`` in the order given."""
    return [(s.name, s.prediction, s.lower, s.upper) for s in summaries]


def _fmt(v: float) -> str:
    if not math.isfinite(v):
        return repr(v)
    a = abs(v)
    if a == 0 or 1e-3 <= a < 1e3:
        return f"{v:.4f}"
    if a < 1e9:
        return f"{v:.0f}"
    return f"{v:.6g}"


def report_csv(rows: Sequence[tuple], header: Sequence[str] = REPORT_HEADER) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for name, *vals in rows:
        w.writerow([name] + [repr(float(v)) for v in vals])
    return buf.getvalue()


def report_text(rows: Sequence[tuple], title: Optional[str] = None) -> str:
    head = ("Index", "Prediction", "Lower bound", "Upper bound")
    body = [(r[0],) + tuple(_fmt(v) for v in r[1:]) for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    line = lambda cells: "  ".join(
        c.ljust(w) if j == 0 else c.rjust(w) for j, (c, w) in enumerate(zip(cells, widths))).rstrip()
    out = [title] if title else []
    out += [line(head), "  ".join("-" * w for w in widths)]
    out += [line(r) for r in body]
    return "\n".join(out) + "\n"
