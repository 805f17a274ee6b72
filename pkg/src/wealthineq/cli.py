"""Command-line entry points: estimate, synth, validate, coverage.

Exit codes: 0 ok, 1 infeasible data, 2 malformed input, 3 internal invariant breach.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, files, posterior
from .censoring import InfeasibleError, build_constraints, tighten
from .domain import DomainError, RunConfig, validate_households
from .gibbs import InfeasibleData, InvariantViolation, PreparationError, SweepError, prepare, run
from .indices import parse_index
from .synth import SynthConfig, simulate, true_indices

log = logging.getLogger("wealthineq")

EXIT_OK, EXIT_INFEASIBLE, EXIT_MALFORMED, EXIT_INVARIANT = 0, 1, 2, 3


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_run_config(path: Optional[str], seed: Optional[int], trace_theta: bool = False,
                     embedded: Optional[dict] = None) -> RunConfig:
    try:
        if path:
            with open(path) as fh:
                d = json.load(fh)
            d = d.get("run", d) if "T" not in d else d
        else:
            d = dict(embedded or {})
        if seed is not None:
            d["seed"] = seed
        if trace_theta:
            d["trace_theta"] = True
        cfg = RunConfig.from_dict(d)
        for name in cfg.indices:
            parse_index(name)
        return cfg
    except (OSError, json.JSONDecodeError, DomainError, TypeError, ValueError) as exc:
        raise CommandError(EXIT_MALFORMED, f"run config: {exc}") from exc


def _load_synth_config(path: str) -> tuple[SynthConfig, dict]:
    try:
        with open(path) as fh:
            d = json.load(fh)
        run_part = d.pop("run", {})
        return SynthConfig.from_dict(d), run_part
    except (OSError, json.JSONDecodeError, TypeError, ValueError, KeyError) as exc:
        raise CommandError(EXIT_MALFORMED, f"synth config: {exc}") from exc


def _read_valid_households(path: str):
    try:
        households, slope_names = files.read_households(path)
    except files.FormatError as exc:
        raise CommandError(EXIT_MALFORMED, str(exc)) from exc
    except OSError as exc:
        raise CommandError(EXIT_MALFORMED, f"cannot read {path}: {exc}") from exc
    problems = validate_households(households)
    if problems:
        row_of = {h.id: k for k, h in enumerate(households, start=1)}
        lines = [f"row {row_of[hid]} (id {hid}): {'; '.join(map(str, v))}" for hid, v in problems.items()]
        raise CommandError(EXIT_MALFORMED, "invalid household record(s):\n  " + "\n  ".join(lines))
    return households, slope_names


def _infeasibility_rows(failures) -> list[tuple[str, str, float]]:
    rows = []
    for hid, exc in failures:
        descs = list(exc.constraints) or [str(exc)]
        for d in descs:
            rows.append((hid, d, exc.slack))
    return rows


def _chain_seed(seed: int, c: int) -> int:
    return seed + c


def _run_chain(args):
    data, cfg, seed = args
    return run(data, cfg, seed=seed)


def estimate(households, slope_names, cfg: RunConfig, chains: int = 1, jobs: int = 1):
    """Prepare the data and run `chains` chains; returns (data, list of ChainResult)."""
    data = prepare(households, cfg, slope_names)
    seeds = [_chain_seed(cfg.seed, c) for c in range(chains)]
    if chains > 1 and jobs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, chains)) as ex:
            results = list(ex.map(_run_chain, [(data, cfg, s) for s in seeds]))
    else:
        results = [run(data, cfg, seed=s) for s in seeds]
    return data, results


def summarize_chains(results, cfg: RunConfig):
    """Pooled summaries and diagnostics per index (each chain drops its own burn-in)."""
    labels = results[0].labels
    summaries, diags = [], []
    for j, lab in enumerate(labels):
        pooled = posterior.pool_chains([r.series[:, j] for r in results], cfg.B)
        summaries.append(posterior.summarize(lab, pooled, 0, cfg.alpha))
        diags.append([posterior.batch_means_diagnostic(r.series[:, j], cfg.B, cfg.batches) for r in results])
    return summaries, diags


def cmd_estimate(args) -> int:
    cfg = _load_run_config(args.config, args.seed, args.trace_theta)
    households, slope_names = _read_valid_households(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        data, results = estimate(households, slope_names, cfg, chains=args.chains, jobs=args.jobs)
    except InfeasibleData as exc:
        files.write_infeasibility(out / "infeasible.csv", _infeasibility_rows(exc.failures))
        raise CommandError(EXIT_INFEASIBLE, f"{exc}; see {out / 'infeasible.csv'}") from exc
    except PreparationError as exc:
        raise CommandError(EXIT_MALFORMED, str(exc)) from exc
    except (SweepError, InvariantViolation) as exc:
        raise CommandError(EXIT_INVARIANT, str(exc)) from exc
    elapsed = time.perf_counter() - t0

    summaries, diags = summarize_chains(results, cfg)
    rows = posterior.build_report(summaries)
    (out / "report.csv").write_text(posterior.report_csv(rows))
    (out / "report.txt").write_text(posterior.report_text(
        rows, title=f"Posterior predictions and {100 * (1 - cfg.alpha):g}% symmetric regions "
                    f"(T={cfg.T}, B={cfg.B}, chains={len(results)})"))
    with open(out / "diagnostics.csv", "w") as fh:
        fh.write("index,chain,mc_std_error,stabilized,half_difference_z\n")
        for s, ds in zip(summaries, diags):
            for c, d in enumerate(ds):
                fh.write(f"{s.name},{c + 1},{d.mc_std_error!r},{int(d.stabilized)},{d.z!r}\n")

    labels = results[0].labels
    for c, r in enumerate(results):
        suffix = "" if len(results) == 1 else f"_chain{c + 1}"
        files.write_series(out / f"series{suffix}.csv", labels, r.series)
        tdir = out / f"traces{suffix}"
        tdir.mkdir(exist_ok=True)
        for j, lab in enumerate(labels):
            n, m = posterior.running_mean_trace(r.series[:, j], cfg.B)
            files.write_trace(tdir / f"{files.safe_name(lab)}.csv", n, m)
        if r.theta_trace is not None:
            files.write_matrix(out / f"theta{suffix}.csv", r.theta_columns, r.theta_trace)

    files.write_json(out / "manifest.json", {
        "command": "estimate",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "input": str(args.data),
        "input_sha256": files.file_sha256(args.data),
        "config": cfg.to_dict(),
        "config_sha256": files.config_hash(cfg.to_dict()),
        "chain_seeds": [r.seed for r in results],
        "households": len(households),
        "elapsed_seconds": round(elapsed, 3),
        "outputs": {"report.csv": files.file_sha256(out / "report.csv")},
    })
    sys.stdout.write(posterior.report_text(rows))
    unstable = [s.name for s, ds in zip(summaries, diags) if not all(d.stabilized for d in ds)]
    if unstable:
        log.warning("running means not stabilized for: %s", ", ".join(unstable))
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg, _ = _load_synth_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pop, cs = simulate(cfg, seed)
    files.write_households(out / "households.csv", cs.households, cfg.slope_names)
    files.write_truth(out / "truth.csv", [h.id for h in cs.households], cs.truth)
    specs = [parse_index(n) for n in RunConfig(T=2, B=0).indices]
    tv = true_indices(pop, specs)
    with open(out / "population_indices.csv", "w") as fh:
        fh.write("index_name,value\n")
        for k, v in tv.items():
            fh.write(f"{k},{v!r}\n")
    files.write_json(out / "manifest.json", {
        "command": "synth", "version": __version__, "seed": seed, "config": cfg.to_dict(),
        "config_sha256": files.config_hash(cfg.to_dict()),
        "outputs": {n: files.file_sha256(out / n) for n in ("households.csv", "truth.csv")},
    })
    log.info("wrote %d households to %s", len(cs.households), out)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load_run_config(args.config, None) if args.config else RunConfig(T=2, B=0)
    households, _ = _read_valid_households(args.data)
    failures = []
    for h in households:
        try:
            tighten(build_constraints(h, cfg))
        except InfeasibleError as exc:
            failures.append((h.id, exc))
    if failures:
        rows = _infeasibility_rows(failures)
        w = sys.stdout
        w.write("id,constraint,slack\n")
        for hid, d, s in rows:
            w.write(f"{hid},\"{d}\",{'' if math.isnan(s) else repr(s)}\n")
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            files.write_infeasibility(Path(args.out) / "infeasible.csv", rows)
        return EXIT_INFEASIBLE
    print(f"{len(households)} households valid and feasible")
    return EXIT_OK


def _replication(job):
    r, synth_cfg, run_cfg = job
    specs = [parse_index(n) for n in run_cfg.indices]
    pop, cs = simulate(synth_cfg, synth_cfg.seed + r)
    truth = true_indices(pop, specs)
    try:
        data = prepare(cs.households, run_cfg, synth_cfg.slope_names)
        res = run(data, run_cfg, specs=specs, seed=run_cfg.seed + r)
    except Exception as exc:
        raise RuntimeError(f"replication {r + 1} failed: {type(exc).__name__}: {exc}") from exc
    rows = []
    for j, sp in enumerate(specs):
        s = posterior.summarize(sp.label, res.series[:, j], run_cfg.B, run_cfg.alpha)
        d = posterior.batch_means_diagnostic(res.series[:, j], run_cfg.B, run_cfg.batches)
        t = truth[sp.label]
        rows.append({
            "replication": r + 1, "index": sp.label, "true": t, "prediction": s.prediction,
            "lower": s.lower, "upper": s.upper, "covered": int(s.lower <= t <= s.upper),
            "mc_std_error": d.mc_std_error, "stabilized": int(d.stabilized), "seconds": res.elapsed,
        })
    return rows


def coverage_summary(rows: Sequence[dict]) -> list[dict]:
    """Per index: empirical coverage, mean bias and the replication standard error of the bias."""
    out = []
    for name in dict.fromkeys(r["index"] for r in rows):
        sub = [r for r in rows if r["index"] == name]
        err = np.array([r["prediction"] - r["true"] for r in sub])
        R = len(sub)
        rep_se = float(err.std(ddof=1) / math.sqrt(R)) if R > 1 else math.nan
        out.append({
            "index": name, "replications": R, "covered": int(sum(r["covered"] for r in sub)),
            "coverage": float(np.mean([r["covered"] for r in sub])),
            "mean_bias": float(err.mean()), "replication_se": rep_se,
            "stabilized": int(sum(r["stabilized"] for r in sub)),
        })
    return out


def run_coverage(synth_cfg: SynthConfig, run_cfg: RunConfig, R: int, jobs: int = 1) -> list[dict]:
    jobs_list = [(r, synth_cfg, run_cfg) for r in range(R)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_replication, jobs_list))
    else:
        parts = []
        for job in jobs_list:
            parts.append(_replication(job))
            log.info("replication %d/%d done", job[0] + 1, R)
    return [row for p in parts for row in p]


def _write_dicts(path, rows: Sequence[dict]) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def cmd_coverage(args) -> int:
    if args.replications < 1:
        raise CommandError(EXIT_MALFORMED, "need at least one replication")
    synth_cfg, embedded = _load_synth_config(args.synth_config)
    run_cfg = _load_run_config(args.config, args.seed, embedded=embedded)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        rows = run_coverage(synth_cfg, run_cfg, args.replications, args.jobs)
    except RuntimeError as exc:
        cause = exc.__cause__
        code = EXIT_INFEASIBLE if isinstance(cause, InfeasibleData) else EXIT_INVARIANT
        raise CommandError(code, str(exc)) from exc
    summary = coverage_summary(rows)
    _write_dicts(out / "coverage.csv", rows)
    _write_dicts(out / "coverage_summary.csv", summary)
    files.write_json(out / "manifest.json", {
        "command": "coverage", "version": __version__, "replications": args.replications,
        "synth_config": synth_cfg.to_dict(), "run_config": run_cfg.to_dict(),
        "elapsed_seconds": round(time.perf_counter() - t0, 3),
    })
    for s in summary:
        print(f"{s['index']:<15} coverage {s['covered']}/{s['replications']}  "
              f"bias {s['mean_bias']:+.6g}  (rep. s.e. {s['replication_se']:.3g})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wealthineq", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="posterior predictions and regions for a household file")
    e.add_argument("data")
    e.add_argument("--config", help="run configuration JSON")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int)
    e.add_argument("--chains", type=int, default=1)
    e.add_argument("--jobs", type=int, default=1, help="worker processes for multiple chains")
    e.add_argument("--trace-theta", action="store_true", help="also write the parameter trace")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("synth", help="synthetic population, sample and censored household file")
    s.add_argument("config", help="synthetic configuration JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    v = sub.add_parser("validate", help="check a household file for format errors and empty regions")
    v.add_argument("data")
    v.add_argument("--config")
    v.add_argument("--out")
    v.set_defaults(func=cmd_validate)

    c = sub.add_parser("coverage", help="repeated synth-then-estimate experiment")
    c.add_argument("synth_config")
    c.add_argument("-R", "--replications", type=int, required=True)
    c.add_argument("--config", help="run configuration JSON (else the synth config's 'run' entry)")
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(func=cmd_coverage)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    if getattr(args, "chains", 1) < 1 or getattr(args, "jobs", 1) < 1:
        print("error: --chains and --jobs must be positive", file=sys.stderr)
        return EXIT_MALFORMED
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
