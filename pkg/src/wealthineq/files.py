"""CSV and JSON formats: household input, truth, index series, traces, reports, manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import re
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .domain import N_COMPONENTS, Household, pattern_of

_COV_RE = re.compile(r"^x([1-5])_(.+)$")


class FormatError(ValueError):
    """Malformed input file; ``row`` is the 1-based data row (None for header problems)."""

    def __init__(self, message: str, row: Optional[int] = None, hid: Optional[str] = None):
        where = f"row {row}" + (f" (id {hid})" if hid else "") + ": " if row is not None else ""
        super().__init__(where + message)
        self.row = row
        self.hid = hid


def _num(s: str) -> str:
    return repr(float(s))


def _fmt_hi(v: float) -> str:
    return "" if math.isinf(v) else repr(float(v))


def household_columns(slope_names: Sequence[Sequence[str]], finsum: bool = True) -> list[str]:
    cols = ["id", "weight"] + [f"d{l}" for l in range(1, N_COMPONENTS + 1)]
    for l in range(1, N_COMPONENTS + 1):
        cols += [f"lo_{l}", f"hi_{l}"]
    cols += ["total_lo", "total_hi"]
    if finsum:
        cols += ["finsum_lo", "finsum_hi", "finsum_components"]
    cols += ["debt", "nded_min", "nded_max", "pays_tax", "cap"]
    for l, names in enumerate(slope_names, start=1):
        cols += [f"x{l}_{n}" for n in names]
    return cols


def write_households(path, households: Sequence[Household], slope_names: Sequence[Sequence[str]]) -> None:
    """Write households in the estimator's input format.

    The leading constant of each covariate vector is implied and not written.
    """
    finsum = any(h.financial_sum_bracket is not None for h in households)
    cols = household_columns(slope_names, finsum)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for h in households:
            row = [h.id, repr(float(h.weight))] + [str(int(o)) for o in h.pattern.owned]
            for l in range(N_COMPONENTS):
                br = h.component_brackets[l]
                row += ["", ""] if br is None else [repr(float(br[0])), _fmt_hi(br[1])]
            row += [repr(float(h.total_bracket[0])), _fmt_hi(h.total_bracket[1])]
            if finsum:
                fb = h.financial_sum_bracket
                row += ["", "", ""] if fb is None else [
                    repr(float(fb[0])), _fmt_hi(fb[1]), " ".join(str(l + 1) for l in h.financial_sum_components)]
            tax = "" if h.pays_wealth_tax is None else str(int(h.pays_wealth_tax))
            row += [repr(float(h.debt)), repr(float(h.nded_min)), repr(float(h.nded_max)), tax, repr(float(h.cap))]
            for l, names in enumerate(slope_names):
                cov = h.covariates[l]
                row += [""] * len(names) if cov is None else [repr(float(v)) for v in cov[1:]]
            w.writerow(row)


def _float(rec: dict, key: str, row: int, hid: str, default: Optional[float] = None) -> float:
    s = (rec.get(key) or "").strip()
    if s == "":
        if default is None:
            raise FormatError(f"missing value for {key}", row, hid)
        return default
    try:
        v = float(s)
    except ValueError:
        raise FormatError(f"{key}: not a number: {s!r}", row, hid) from None
    if math.isnan(v):
        raise FormatError(f"{key}: NaN is not allowed", row, hid)
    return v


def read_households(path) -> tuple[list[Household], list[list[str]]]:
    """Parse a household CSV; returns the households and the slope names per component.

    Empty lower bounds read as 0 and empty upper bounds as +inf. Raises
    :class:`FormatError` naming the offending row.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        required = ["id", "weight"] + [f"d{l}" for l in range(1, N_COMPONENTS + 1)]
        missing = [c for c in required if c not in header]
        if missing:
            raise FormatError(f"missing column(s): {', '.join(missing)}")
        slope_names: list[list[str]] = [[] for _ in range(N_COMPONENTS)]
        for c in header:
            mt = _COV_RE.match(c)
            if mt:
                slope_names[int(mt.group(1)) - 1].append(mt.group(2))
        out: list[Household] = []
        seen: set[str] = set()
        for row, rec in enumerate(reader, start=1):
            if None in rec:
                raise FormatError("more fields than header columns", row)
            hid = (rec.get("id") or "").strip()
            if not hid:
                raise FormatError("empty id", row)
            if hid in seen:
                raise FormatError("duplicate id", row, hid)
            seen.add(hid)
            try:
                owned = tuple(int(rec[f"d{l}"]) for l in range(1, N_COMPONENTS + 1))
            except (TypeError, ValueError):
                raise FormatError("ownership flags must be 0 or 1", row, hid) from None
            if any(o not in (0, 1) for o in owned):
                raise FormatError("ownership flags must be 0 or 1", row, hid)
            try:
                pattern = pattern_of(owned)
            except ValueError as exc:
                raise FormatError(str(exc), row, hid) from None
            brackets, covs = [], []
            for l in range(1, N_COMPONENTS + 1):
                if owned[l - 1]:
                    brackets.append((_float(rec, f"lo_{l}", row, hid, 0.0),
                                     _float(rec, f"hi_{l}", row, hid, math.inf)))
                    covs.append((1.0,) + tuple(_float(rec, f"x{l}_{n}", row, hid) for n in slope_names[l - 1]))
                else:
                    brackets.append(None)
                    covs.append(None)
            fin = None
            fin_comps = (0,)
            if (rec.get("finsum_lo") or "").strip() or (rec.get("finsum_hi") or "").strip():
                fin = (_float(rec, "finsum_lo", row, hid, 0.0), _float(rec, "finsum_hi", row, hid, math.inf))
                spec = (rec.get("finsum_components") or "").strip()
                if spec:
                    try:
                        fin_comps = tuple(int(x) - 1 for x in spec.split())
                    except ValueError:
                        raise FormatError(f"finsum_components: bad list {spec!r}", row, hid) from None
                    if any(not 0 <= l < N_COMPONENTS for l in fin_comps):
                        raise FormatError("finsum_components out of range", row, hid)
            tax = (rec.get("pays_tax") or "").strip()
            if tax not in ("", "0", "1"):
                raise FormatError(f"pays_tax must be 0, 1 or empty, got {tax!r}", row, hid)
            out.append(Household(
                id=hid,
                weight=_float(rec, "weight", row, hid),
                pattern=pattern,
                covariates=tuple(covs),
                component_brackets=tuple(brackets),
                total_bracket=(_float(rec, "total_lo", row, hid, 0.0), _float(rec, "total_hi", row, hid, math.inf)),
                financial_sum_bracket=fin,
                financial_sum_components=fin_comps,
                debt=_float(rec, "debt", row, hid, 0.0),
                nded_min=_float(rec, "nded_min", row, hid, 0.0),
                nded_max=_float(rec, "nded_max", row, hid, 0.0),
                pays_wealth_tax=None if tax == "" else tax == "1",
                cap=_float(rec, "cap", row, hid, 1.0e7),
            ))
    return out, slope_names


def write_truth(path, ids: Sequence[str], truth: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"w{l}" for l in range(1, N_COMPONENTS + 1)] + ["total"])
        for hid, row in zip(ids, truth):
            w.writerow([hid] + [repr(float(v)) for v in row] + [repr(float(row.sum()))])


def write_series(path, labels: Sequence[str], series: np.ndarray, first_sweep: int = 1) -> None:
    """Long-format index series: ``sweep, index_name, value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sweep", "index_name", "value"])
        for n, row in enumerate(series, start=first_sweep):
            for lab, v in zip(labels, row):
                w.writerow([n, lab, repr(float(v))])


def write_trace(path, n: np.ndarray, partial: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "partial_mean"])
        for a, b in zip(n, partial):
            w.writerow([int(a), repr(float(b))])


def write_matrix(path, columns: Sequence[str], rows: np.ndarray, first_sweep: int = 1) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sweep"] + list(columns))
        for n, row in enumerate(rows, start=first_sweep):
            w.writerow([n] + [repr(float(v)) for v in row])


def write_infeasibility(path, rows: Sequence[tuple[str, str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "constraint", "slack"])
        for hid, desc, slack in rows:
            w.writerow([hid, desc, "" if slack is None or math.isnan(slack) else repr(float(slack))])


def safe_name(label: str) -> str:
    """File-system friendly version of an index label (``P95/D5`` -> ``P95_D5``)."""
    return re.sub(r"[^A-Za-z0-9.]+", "_", label).strip("_")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
