"""Command-line front end: ``mfpg run | sweep | variance-report | summarize``.

Exit codes: 0 success, 2 configuration or usage error, 3 training aborted.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, ExperimentConfig, config_from_dict, load_config, parse_seed_list,
                     tomllib, with_override)
from .evaluation import VarianceVariant, variance_study
from .policy import ValueNetwork, make_policy
from .stats import bootstrap_diff_ci, bootstrap_mean_ci, collapse_count
from .trainer import TrainingAborted, train

log = logging.getLogger("mfpg")

SCHEMA_VERSION = 1
CURVE_COLUMNS = ("seed", "hf_step", "mean_return")
DIAGNOSTIC_COLUMNS = ("seed", "iter", "hf_steps", "rho_batch", "rho_ema", "s_high", "s_low", "c_star",
                      "cv_applied", "surrogate", "hf_only_loss", "value_loss", "grad_norm")
VARIANCE_COLUMNS = ("seed", "step", "variant", "kind", "batch_transitions", "baseline", "variance",
                    "repeats", "ratio")
BOOTSTRAP_RESAMPLES = 10_000
BOOTSTRAP_SEED = 0

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ writers


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    """Header row plus data; floats in shortest round-trip form, LF line endings."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue().encode())


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes((json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n").encode())


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)


# -------------------------------------------------------------------- run


def _train_seed(args):
    config, seed = args
    pair = config.env.build()
    try:
        return seed, train(config.trainer, pair, seed), None
    except TrainingAborted as exc:
        return seed, None, exc


def _curve_rows(seed, curve):
    for step, mean, eps in zip(curve.steps, curve.means, curve.episodes):
        yield (seed, step, mean, *eps)


def _diagnostic_rows(seed, records):
    for r in records:
        yield (seed, r.iteration, r.hf_steps, r.rho_batch, r.rho_ema, r.s_high, r.s_low, r.c_star,
               r.cv_applied, r.surrogate, r.hf_only, r.value_loss, r.grad_norm)


def _save_checkpoint(path: Path, ckpt, config: ExperimentConfig, seed: int) -> None:
    arrays = {f"policy/{k}": v for k, v in ckpt.policy_params.items()}
    arrays.update({f"value/{k}": v for k, v in ckpt.value_params.items()})
    meta = {"seed": seed, "step": ckpt.step, "hidden": list(config.trainer.hidden),
            "log_std_range": list(config.trainer.log_std_range)}
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path: Path, spec):
    """Rebuild ``(seed, step, policy, value_net)`` from a saved checkpoint."""
    with np.load(path) as data:
        meta = json.loads(str(data["meta"]))
        pol = {k.split("/", 1)[1]: data[k] for k in data.files if k.startswith("policy/")}
        val = {k.split("/", 1)[1]: data[k] for k in data.files if k.startswith("value/")}
    policy = make_policy(spec, meta["hidden"], np.random.default_rng(0), meta["log_std_range"]).copy(pol)
    value = ValueNetwork(spec.obs_dim, meta["hidden"], params=val)
    return meta["seed"], meta["step"], policy, value


def summarize_finals(finals: dict, aucs: dict, baseline: dict | None = None) -> dict:
    """Bootstrap summary of per-seed final returns and AUCs (and deltas vs a baseline run)."""
    seeds = sorted(finals)
    f = np.array([finals[s] for s in seeds])
    a = np.array([aucs[s] for s in seeds])
    out = {"seeds": seeds,
           "final_return": {str(s): finals[s] for s in seeds},
           "auc": {str(s): aucs[s] for s in seeds},
           "median_final_return": float(np.median(f))}
    if len(seeds) >= 2:
        out["final_return_ci"] = bootstrap_mean_ci(f, BOOTSTRAP_RESAMPLES, 0.95, BOOTSTRAP_SEED).as_dict()
        out["auc_ci"] = bootstrap_mean_ci(a, BOOTSTRAP_RESAMPLES, 0.95, BOOTSTRAP_SEED).as_dict()
    if baseline is not None:
        bf = np.array(list(baseline["final_return"].values()), dtype=float)
        ba = np.array(list(baseline["auc"].values()), dtype=float)
        if len(bf) >= 2 and len(seeds) >= 2:
            out["delta_final_return_ci"] = bootstrap_diff_ci(
                f, bf, BOOTSTRAP_RESAMPLES, 0.95, BOOTSTRAP_SEED).as_dict()
            out["delta_auc_ci"] = bootstrap_diff_ci(a, ba, BOOTSTRAP_RESAMPLES, 0.95,
                                                    BOOTSTRAP_SEED).as_dict()
        out["baseline_median_final_return"] = float(np.median(bf))
        out["collapsed"] = bool(collapse_count([np.median(f)], [np.median(bf)]))
    return out


def _load_summary(run_dir: Path) -> dict:
    path = Path(run_dir) / "summary.json"
    if not path.is_file():
        raise UsageError(f"no summary.json in run directory {run_dir}")
    return json.loads(path.read_text())


def run_experiment(config: ExperimentConfig, out: Path, *, force: bool = False, workers: int = 1) -> dict:
    """Train every seed of ``config`` and write curves, diagnostics, summary and manifest."""
    _prepare_out(out, force)
    baseline = _load_summary(Path(config.baseline)) if config.baseline else None
    started = time.perf_counter()
    jobs = [(config, s) for s in config.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_seed, jobs))
    else:
        results = [_train_seed(j) for j in jobs]

    files = {"curves": {}, "diagnostics": {}, "checkpoints": {}}
    finals, aucs, aborted = {}, {}, []
    for seed, result, exc in results:
        diag = out / "diagnostics" / f"seed_{seed}.csv"
        if exc is not None:
            write_csv(diag, DIAGNOSTIC_COLUMNS, _diagnostic_rows(seed, exc.records))
            files["diagnostics"][str(seed)] = str(diag.relative_to(out))
            aborted.append((seed, str(exc)))
            continue
        curve_path = out / "curves" / f"seed_{seed}.csv"
        n_eps = len(result.curve.episodes[0])
        header = CURVE_COLUMNS + tuple(f"episode_{i}" for i in range(1, n_eps + 1))
        write_csv(curve_path, header, _curve_rows(seed, result.curve))
        write_csv(diag, DIAGNOSTIC_COLUMNS, _diagnostic_rows(seed, result.records))
        files["curves"][str(seed)] = str(curve_path.relative_to(out))
        files["diagnostics"][str(seed)] = str(diag.relative_to(out))
        for ck in result.checkpoints:
            p = out / "checkpoints" / f"seed_{seed}_step_{ck.step}.npz"
            _save_checkpoint(p, ck, config, seed)
            files["checkpoints"].setdefault(str(seed), []).append(str(p.relative_to(out)))
        finals[seed] = result.curve.final_return()
        aucs[seed] = result.curve.auc()

    if finals:
        write_json(out / "summary.json", summarize_finals(finals, aucs, baseline))
    write_json(out / "config.json", config.to_dict())
    manifest = {"schema_version": SCHEMA_VERSION, "code_version": __version__,
                "config_hash": config.config_hash(), "seeds": list(config.seeds),
                "columns": {"curves": list(CURVE_COLUMNS) + ["episode_1", "..."],
                            "diagnostics": list(DIAGNOSTIC_COLUMNS)},
                "files": files, "summary": "summary.json" if finals else None,
                "aborted": [{"seed": s, "error": m} for s, m in aborted],
                "wall_clock_seconds": round(time.perf_counter() - started, 3)}
    write_json(out / "manifest.json", manifest)
    if aborted:
        raise TrainingAborted("; ".join(f"seed {s}: {m}" for s, m in aborted), [])
    return manifest


# ------------------------------------------------------------------ sweep


def parse_value(text: str):
    """A sweep value as a TOML literal (number, boolean, quoted string), else the bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def run_sweep(doc: dict, axis: str, values: list, out: Path, *, seeds=None, force=False,
              workers=1) -> list[dict]:
    if not values:
        raise ConfigError(axis, "sweep needs at least one value")
    configs = []
    for v in values:
        cfg = config_from_dict(with_override(doc, axis, v))
        configs.append((v, cfg.with_seeds(seeds) if seeds else cfg))
    _prepare_out(out, force)
    manifests, rows = [], []
    for v, cfg in configs:
        sub = out / f"{axis}={v}"
        manifests.append(run_experiment(cfg, sub, force=True, workers=workers))
        summary = _load_summary(sub)
        ci = summary.get("final_return_ci", {})
        delta = summary.get("delta_final_return_ci", {})
        rows.append((axis, v, summary["median_final_return"], ci.get("point", math.nan),
                     ci.get("ci_low", math.nan), ci.get("ci_high", math.nan),
                     delta.get("point", math.nan), delta.get("ci_low", math.nan),
                     delta.get("ci_high", math.nan)))
    write_csv(out / "sweep.csv", ("axis", "value", "median_final_return", "mean_final_return",
                                  "ci_low", "ci_high", "delta_final_return", "delta_ci_low",
                                  "delta_ci_high"), rows)
    write_json(out / "sweep.json", {"axis": axis, "values": [str(v) for v in values],
                                    "runs": [f"{axis}={v}" for v in values]})
    return manifests


# -------------------------------------------------------- variance report


def variance_report(config: ExperimentConfig, checkpoint_dir: Path, out: Path, *,
                    batch_sizes=(100,), repeats: int = 200, force: bool = False) -> list[dict]:
    """Scalar-loss variance for hf-only and mfpg estimators at every saved checkpoint."""
    paths = sorted(Path(checkpoint_dir).rglob("*.npz"))
    if not paths:
        raise UsageError(f"no checkpoints found under {checkpoint_dir}")
    _prepare_out(out, force)
    pair = config.env.build()
    loaded = [load_checkpoint(p, pair.spec) for p in paths]
    variants = []
    for baseline in (True, False):
        variants += [VarianceVariant("hf-only", b, baseline) for b in batch_sizes]
        variants.append(VarianceVariant("mfpg", batch_sizes[0], baseline))
    rows = []
    for seed in sorted({s for s, *_ in loaded}):
        ckpts = sorted((step, pol, val) for s, step, pol, val in loaded if s == seed)
        for row in variance_study(ckpts, pair, variants, repeats, seed, config.trainer.low_multiplier,
                                  pair.spec.gamma):
            rows.append({"seed": seed, **row})
    write_csv(out / "variance.csv", VARIANCE_COLUMNS, ([r[c] for c in VARIANCE_COLUMNS] for r in rows))
    # medians over seeds, per checkpoint step and variant
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["step"], r["variant"]), []).append(r)
    med_rows = []
    for (step, variant), rs in sorted(groups.items()):
        ratios = [r["ratio"] for r in rs if r["ratio"] != ""]
        med_rows.append((step, variant, rs[0]["kind"], rs[0]["batch_transitions"], rs[0]["baseline"],
                         float(np.median([r["variance"] for r in rs])),
                         float(np.median(ratios)) if ratios else "", len(rs)))
    write_csv(out / "variance_median.csv", ("step", "variant", "kind", "batch_transitions", "baseline",
                                            "median_variance", "median_ratio", "seeds"), med_rows)
    return rows


# -------------------------------------------------------------- summarize


def summarize_runs(run_dirs, baseline_dir=None) -> list[tuple]:
    """One row per run: mean/median final return, CI, and delta vs the baseline run."""
    base = _load_summary(Path(baseline_dir)) if baseline_dir else None
    rows, meds, ref = [], [], []
    for d in run_dirs:
        s = _load_summary(Path(d))
        finals = np.array(list(s["final_return"].values()), dtype=float)
        aucs = np.array(list(s["auc"].values()), dtype=float)
        ci = bootstrap_mean_ci(finals, BOOTSTRAP_RESAMPLES, 0.95, BOOTSTRAP_SEED)
        row = [str(d), len(finals), float(np.median(finals)), ci.point, ci.ci_low, ci.ci_high,
               float(aucs.mean())]
        if base is not None:
            bf = np.array(list(base["final_return"].values()), dtype=float)
            delta = bootstrap_diff_ci(finals, bf, BOOTSTRAP_RESAMPLES, 0.95, BOOTSTRAP_SEED)
            row += [delta.point, delta.ci_low, delta.ci_high, delta.excludes_zero]
            meds.append(np.median(finals))
            ref.append(np.median(bf))
        rows.append(tuple(row))
    if base is not None:
        rows.append(("collapse_count", collapse_count(meds, ref)))
    return rows


SUMMARY_COLUMNS = ("run", "seeds", "median_final_return", "mean_final_return", "ci_low", "ci_high",
                   "mean_auc")
DELTA_COLUMNS = ("delta_final_return", "delta_ci_low", "delta_ci_high", "significant")


# ------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfpg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
        if config:
            p.add_argument("--config", required=True, type=Path, help="TOML experiment file")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("run", help="train every seed of a configuration")
    common(p)
    p.add_argument("--seeds", help="override the seed list, e.g. 3-22 or 0,1,2")
    p.add_argument("--workers", type=int, default=1, help="parallel seed processes")

    p = sub.add_parser("sweep", help="one run per value of a configuration field")
    common(p)
    p.add_argument("--axis", required=True, help="dotted field name, e.g. trainer.eta_ma")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("variance-report", help="estimator variance at saved checkpoints")
    common(p)
    p.add_argument("--checkpoints", required=True, type=Path, help="directory holding .npz checkpoints")
    p.add_argument("--batch-sizes", default="100", help="comma-separated high-fidelity batch sizes")
    p.add_argument("--repeats", type=int, default=200)

    p = sub.add_parser("summarize", help="tabulate finished runs")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("runs", nargs="+", type=Path, help="run directories")
    p.add_argument("--baseline", type=Path, help="reference run for delta confidence intervals")
    p.add_argument("--out", type=Path, help="CSV file (default: stdout)")
    return parser


def _out_dir(args, config) -> Path:
    out = args.out or (Path(config.out) if config.out else None)
    if out is None:
        raise UsageError("no output directory: pass --out or set experiment.out")
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            config = load_config(args.config)
            if args.seeds:
                config = config.with_seeds(parse_seed_list(args.seeds))
            run_experiment(config, _out_dir(args, config), force=args.force, workers=args.workers)
        elif args.command == "sweep":
            config = load_config(args.config)
            doc = tomllib.loads(args.config.read_text())
            values = [parse_value(v.strip()) for v in args.values.split(",") if v.strip()]
            seeds = parse_seed_list(args.seeds) if args.seeds else None
            run_sweep(doc, args.axis, values, _out_dir(args, config), seeds=seeds, force=args.force,
                      workers=args.workers)
        elif args.command == "variance-report":
            config = load_config(args.config)
            try:
                sizes = tuple(int(v) for v in args.batch_sizes.split(","))
            except ValueError:
                raise UsageError(f"cannot parse --batch-sizes {args.batch_sizes!r}") from None
            variance_report(config, args.checkpoints, _out_dir(args, config), batch_sizes=sizes,
                            repeats=args.repeats, force=args.force)
        elif args.command == "summarize":
            rows = summarize_runs(args.runs, args.baseline)
            header = SUMMARY_COLUMNS + (DELTA_COLUMNS if args.baseline else ())
            if args.out:
                write_csv(args.out, header, rows)
            else:
                w = csv.writer(sys.stdout, lineterminator="\n")
                w.writerow(header)
                w.writerows([_cell(v) for v in r] for r in rows)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
