"""Experiment harness: wires generators, fits and metrics into reports.

Usage::

    softplusvi <task> --config <path> [--output <path>] [--seed <int>]
               [--repeats <int>] [--methods viper,vipg,vimc]

Tasks: ``bound-grid``, ``logistic-sim``, ``gp-toy``, ``fit-file``.  The
config file is a single JSON document; command-line flags override the
corresponding fields.  Reports are written as ``<output>.json`` and/or
``<output>.csv`` depending on ``output_format``.

Everything is derived from ``base_seed``: repeat r uses seed_r =
base_seed + r for its data, fit initializations and Monte Carlo streams,
so a rerun with the same config produces byte-identical reports except for
the wall-time fields.  Repeats are independent and may be executed by a
process pool (``SOFTPLUSVI_WORKERS`` environment variable); report rows
are always ordered by (method, seed).

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 at least one
fit did not converge (unless ``allow_nonconverged`` is set).

CSV columns (fit tasks, stable order)::

    method, seed, converged, iterations, elbo_mc, elbo_mc_se, kl_mc_fwd,
    kl_mc_rev, mse, coverage, ci_width, auc, wall_time_s, error

CSV columns (bound-grid)::

    theta, tau, ground_truth, jj_bound, rel_err_jj,
    eta_l{l} and rel_err_eta_l{l} for each requested l,
    min_l_0.5pct, min_l_1pct, min_l_2.5pct, min_l_5pct

Floats are printed with 17 significant digits so reports diff cleanly.
"""

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .bound import (
    jj_expected_bound_values,
    partial_sum_values,
    quad_expectation,
    series_terms,
    GaussianMoment,
)
from .datagen import (
    GPToySpec,
    LogisticSimSpec,
    gen_gp_toy,
    gen_logistic,
    load_libsvm,
    train_test_split,
)
from .metrics import (
    auc,
    coverage_and_width,
    kl_mc_gaussians,
    kl_mc_marginals,
    mse_posterior_mean,
    quantile_summary,
)
from .vblogit import (
    FitConfig,
    LabeledDataset,
    elbo_mc,
    fit_vimc,
    fit_vipg,
    fit_viper,
    local_moments,
    predict_proba,
    standard_prior,
)
from .vbgp import (
    fit_vimc_gp,
    fit_vipg_gp,
    fit_viper_gp,
    gp_elbo_mc,
    gp_predict_proba,
    q_f_moments,
)

__all__ = ["main", "run_bound_grid", "run_logistic_sim", "run_gp_toy", "run_fit_file"]

SCHEMA_VERSION = 1

_TASKS = ("bound-grid", "logistic-sim", "gp-toy", "fit-file")
_METHODS = ("viper", "vipg", "vimc")

#: offset separating the ELBO-evaluation Monte Carlo stream from fit streams
_EVAL_SEED_OFFSET = 7_654_321

_ERROR_THRESHOLDS = (0.005, 0.01, 0.025, 0.05)
_THRESHOLD_TAGS = ("0.5pct", "1pct", "2.5pct", "5pct")

_FIT_CSV_COLUMNS = (
    "method", "seed", "converged", "iterations", "elbo_mc", "elbo_mc_se",
    "kl_mc_fwd", "kl_mc_rev", "mse", "coverage", "ci_width", "auc",
    "wall_time_s", "error",
)

_SUMMARY_METRICS = (
    "elbo_mc", "kl_mc_fwd", "kl_mc_rev", "mse", "coverage", "ci_width",
    "auc", "iterations", "wall_time_s",
)


class UsageError(Exception):
    """Bad command line or config contents (exit code 1)."""


class DataError(Exception):
    """Unreadable or malformed input data (exit code 2)."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved harness configuration (config file plus CLI overrides)."""

    task: str
    methods: tuple = _METHODS
    n_repeats: int = 100
    base_seed: int = 0
    fit: FitConfig = field(default_factory=FitConfig)
    sim: dict = field(default_factory=dict)
    data_path: str = None
    model: str = "logistic"
    n_inducing: int = 50
    train_fraction: float = 0.8
    elbo_mc_samples: int = 10000
    allow_nonconverged: bool = False
    output_path: str = "report"
    output_format: tuple = ("json",)

    def __post_init__(self):
        if self.task not in _TASKS:
            raise UsageError(f"unknown task {self.task!r}; expected one of {_TASKS}")
        if not self.methods:
            raise UsageError("methods must be nonempty")
        for m in self.methods:
            if m not in _METHODS:
                raise UsageError(f"unknown method {m!r}; expected subset of {_METHODS}")
        if self.n_repeats < 1:
            raise UsageError("n_repeats must be >= 1")
        for fmt in self.output_format:
            if fmt not in ("json", "csv"):
                raise UsageError(f"unknown output format {fmt!r}")
        if self.model not in ("logistic", "gp"):
            raise UsageError(f"unknown model {self.model!r}")


_CONFIG_KEYS = {
    "task", "methods", "n_repeats", "base_seed", "fit", "sim", "data_path",
    "model", "n_inducing", "train_fraction", "elbo_mc_samples",
    "allow_nonconverged", "output_path", "output_format",
    "theta", "tau", "l_list", "quad_nodes",
}


def _load_config(task, args):
    raw = {}
    if args.config is not None:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as e:
            raise UsageError(f"cannot read config file {args.config}: {e}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {args.config} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise UsageError("config root must be a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")

    grid = {k: raw.pop(k, None) for k in ("theta", "tau", "l_list", "quad_nodes")}

    if "fit" in raw:
        try:
            raw["fit"] = FitConfig(**raw["fit"])
        except (TypeError, ValueError) as e:
            raise UsageError(f"invalid fit config: {e}") from e
    for key in ("methods", "output_format"):
        if key in raw and isinstance(raw[key], (list, str)):
            value = raw[key]
            raw[key] = tuple(value.split(",")) if isinstance(value, str) else tuple(value)

    if args.seed is not None:
        raw["base_seed"] = args.seed
    if args.repeats is not None:
        raw["n_repeats"] = args.repeats
    if args.methods is not None:
        raw["methods"] = tuple(args.methods.split(","))
    if args.output is not None:
        raw["output_path"] = args.output

    try:
        config = ExperimentConfig(task=task, **raw)
    except TypeError as e:
        raise UsageError(f"invalid config: {e}") from e
    return config, grid


# ---------------------------------------------------------------------------
# report plumbing
# ---------------------------------------------------------------------------

def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _write_csv(path, columns, rows):
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in columns))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_report(report, config, csv_columns, csv_rows):
    base = config.output_path
    written = []
    try:
        if "json" in config.output_format:
            path = base + ".json"
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(report, fh, sort_keys=True, indent=2)
                fh.write("\n")
            written.append(path)
        if "csv" in config.output_format:
            path = base + ".csv"
            _write_csv(path, csv_columns, csv_rows)
            written.append(path)
    except OSError as e:
        raise UsageError(f"cannot write report to {base!r}: {e}") from e
    return written


def _config_echo(config):
    echo = dataclasses.asdict(config)
    echo["fit"] = dataclasses.asdict(config.fit)
    echo["methods"] = list(config.methods)
    echo["output_format"] = list(config.output_format)
    return echo


def _summarize(rows):
    """Per-method 2.5%/50%/97.5% quantiles of every numeric metric."""
    summary = {}
    for method in sorted({r["method"] for r in rows}):
        method_rows = [r for r in rows if r["method"] == method]
        entry = {}
        for metric in _SUMMARY_METRICS:
            values = [r[metric] for r in method_rows if r.get(metric) is not None]
            if values:
                q = quantile_summary(np.asarray(values, dtype=np.float64))
                entry[metric] = {"q025": q[0], "median": q[1], "q975": q[2]}
            else:
                entry[metric] = None
        summary[method] = entry
    return summary


def _worker_count():
    raw = os.environ.get("SOFTPLUSVI_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _map_repeats(fn, config):
    repeats = range(1, config.n_repeats + 1)
    workers = _worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            nested = list(pool.map(fn, repeats))
    else:
        nested = [fn(r) for r in repeats]
    rows = [row for batch in nested for row in batch]
    rows.sort(key=lambda r: (r["method"], r["seed"]))
    return rows


def _null_row(method, seed, error):
    return {
        "method": method,
        "seed": seed,
        "converged": False,
        "iterations": None,
        "elbo_mc": None,
        "elbo_mc_se": None,
        "kl_mc_fwd": None,
        "kl_mc_rev": None,
        "mse": None,
        "coverage": None,
        "ci_width": None,
        "auc": None,
        "wall_time_s": None,
        "error": error,
    }


# ---------------------------------------------------------------------------
# task: bound-grid
# ---------------------------------------------------------------------------

def _grid_values(block, name):
    if block is None:
        raise UsageError(f"bound-grid config requires a {name!r} range")
    if isinstance(block, list):
        return np.asarray(block, dtype=np.float64)
    try:
        start, stop, step = block["start"], block["stop"], block["step"]
    except (TypeError, KeyError) as e:
        raise UsageError(
            f"{name!r} must be a list or an object with start/stop/step"
        ) from e
    count = int(round((stop - start) / step)) + 1
    return start + step * np.arange(count)


def run_bound_grid(theta_values, tau_values, l_list, output_path,
                   output_format=("json",), quad_nodes=200, max_l=25):
    """Tabulate the series and quadratic bounds against quadrature truth.

    For every grid point the report carries eta_l for each requested l, the
    quadratic bound at its optimal scale, relative errors against the
    ground truth, and the minimal l reaching relative error below 0.5%, 1%,
    2.5% and 5% (searched up to ``max_l``; empty when not reached).
    """
    theta_values = np.asarray(theta_values, dtype=np.float64)
    tau_values = np.asarray(tau_values, dtype=np.float64)
    if np.any(tau_values <= 0.0):
        raise UsageError("tau grid values must be positive")
    l_list = sorted(int(l) for l in (l_list or [12]))
    if any(l < 1 for l in l_list):
        raise UsageError("l_list entries must be >= 1")
    t_start = time.perf_counter()

    TH, TA = [a.ravel() for a in np.meshgrid(theta_values, tau_values, indexing="ij")]
    truth = np.array([
        quad_expectation(GaussianMoment(t, s), quad_nodes) for t, s in zip(TH, TA)
    ])
    t_opt = np.hypot(TH, TA)
    jj = jj_expected_bound_values(TH, TA, t_opt)

    # cumulative partial sums give every eta_l in one pass over the terms
    n_terms = 2 * max(max_l, max(l_list)) - 1
    terms = series_terms(TH, TA, n_terms)
    signs = np.where(np.arange(1, n_terms + 1) % 2 == 1, 1.0, -1.0)
    sums = np.cumsum(signs[:, None] * terms, axis=0) + partial_sum_values(TH, TA, 0)
    etas = {l: sums[2 * l - 2] for l in range(1, (n_terms + 1) // 2 + 1)}

    rel_err = {l: np.abs(e - truth) / np.abs(truth) for l, e in etas.items()}
    rel_err_jj = np.abs(jj - truth) / np.abs(truth)

    min_l = {}
    for thr, tag in zip(_ERROR_THRESHOLDS, _THRESHOLD_TAGS):
        col = np.full(TH.shape, -1, dtype=int)
        for l in sorted(etas):
            hit = (col < 0) & (rel_err[l] < thr)
            col[hit] = l
        min_l[tag] = col

    columns = ["theta", "tau", "ground_truth", "jj_bound", "rel_err_jj"]
    for l in l_list:
        columns += [f"eta_l{l}", f"rel_err_eta_l{l}"]
    columns += [f"min_l_{tag}" for tag in _THRESHOLD_TAGS]

    rows = []
    for i in range(TH.shape[0]):
        row = {
            "theta": float(TH[i]),
            "tau": float(TA[i]),
            "ground_truth": float(truth[i]),
            "jj_bound": float(jj[i]),
            "rel_err_jj": float(rel_err_jj[i]),
        }
        for l in l_list:
            row[f"eta_l{l}"] = float(etas[l][i])
            row[f"rel_err_eta_l{l}"] = float(rel_err[l][i])
        for tag in _THRESHOLD_TAGS:
            value = int(min_l[tag][i])
            row[f"min_l_{tag}"] = value if value > 0 else None
        rows.append(row)

    summary = {
        "points": len(rows),
        "max_min_l": {
            tag: (int(min_l[tag].max()) if np.all(min_l[tag] > 0) else None)
            for tag in _THRESHOLD_TAGS
        },
        "jj_rel_err_dominates_l12": bool(
            np.all(rel_err_jj >= rel_err[12] - 1e-15) if 12 in rel_err else False
        ),
    }
    report = {
        "schema_version": SCHEMA_VERSION,
        "library_version": __version__,
        "task": "bound-grid",
        "config": {
            "theta": list(map(float, theta_values)),
            "tau": list(map(float, tau_values)),
            "l_list": l_list,
            "quad_nodes": quad_nodes,
            "max_l": max_l,
        },
        "rows": rows,
        "summary": summary,
        "total_wall_time_s": time.perf_counter() - t_start,
    }
    config = ExperimentConfig(
        task="bound-grid", output_path=output_path, output_format=tuple(output_format)
    )
    _write_report(report, config, columns, rows)
    return report


# ---------------------------------------------------------------------------
# fit tasks
# ---------------------------------------------------------------------------

_LOGIT_FITS = {"viper": fit_viper, "vipg": fit_vipg, "vimc": fit_vimc}
_GP_FITS = {"viper": fit_viper_gp, "vipg": fit_vipg_gp, "vimc": fit_vimc_gp}


def _safe_auc(y, scores):
    """AUC, or None when only one class is present in the scored split."""
    try:
        return auc(y, scores)
    except ValueError:
        return None


def _logistic_rows(config, data, seed, test=None):
    """Fit every requested method on one dataset and compute its metrics.

    The AUC is evaluated on ``test`` when a held-out split is provided and
    on the training data otherwise (the simulation studies score in-sample
    against the stored ground truth).
    """
    prior = standard_prior(data.p)
    fit_cfg = replace(config.fit, seed=seed)
    fits = {}
    rows = []
    for method in config.methods:
        try:
            fits[method] = _LOGIT_FITS[method](data, prior, fit_cfg)
        except RuntimeError as e:
            rows.append(_null_row(method, seed, str(e)))
    ref = fits.get("vimc")
    for method, res in fits.items():
        q = res.posterior
        mean, se = elbo_mc(data, q, prior, config.elbo_mc_samples,
                           seed=seed + _EVAL_SEED_OFFSET)
        kl_fwd = kl_rev = None
        if ref is not None and method != "vimc":
            kl_fwd, kl_rev = kl_mc_gaussians(ref.posterior, q)
        moments = local_moments(data, q)
        mse = cov = None
        if data.f0 is not None:
            mse = mse_posterior_mean(moments.theta, data.f0)
            cov, width = coverage_and_width(moments, data.f0)
        else:
            _, width = coverage_and_width(moments, moments.theta)
        scored = test if test is not None and test.n > 0 else data
        rows.append({
            "method": method,
            "seed": seed,
            "converged": res.converged,
            "iterations": res.iterations,
            "elbo_mc": mean,
            "elbo_mc_se": se,
            "kl_mc_fwd": kl_fwd,
            "kl_mc_rev": kl_rev,
            "mse": mse,
            "coverage": cov,
            "ci_width": width,
            "auc": _safe_auc(scored.y, predict_proba(q, scored.X)),
            "wall_time_s": res.wall_time,
            "error": None,
        })
    return rows


def _gp_rows(config, train, test, seed):
    n_inducing = min(config.n_inducing, train.n)
    fit_cfg = replace(config.fit, seed=seed)
    fits = {}
    rows = []
    for method in config.methods:
        try:
            fits[method] = _GP_FITS[method](train, n_inducing, fit_cfg)
        except RuntimeError as e:
            rows.append(_null_row(method, seed, str(e)))
    ref = fits.get("vimc")
    ref_moments = q_f_moments(ref[0], train.X) if ref is not None else None
    for method, (state, res) in fits.items():
        mean, se = gp_elbo_mc(state, train, config.elbo_mc_samples,
                              seed=seed + _EVAL_SEED_OFFSET)
        moments = q_f_moments(state, train.X)
        kl_fwd = kl_rev = None
        if ref_moments is not None and method != "vimc":
            kl_fwd, kl_rev = kl_mc_marginals(ref_moments, moments)
        mse = cov = None
        if train.f0 is not None:
            mse = mse_posterior_mean(moments.theta, train.f0)
            cov, width = coverage_and_width(moments, train.f0)
        else:
            _, width = coverage_and_width(moments, moments.theta)
        scored = test if test is not None and test.n > 0 else train
        test_auc = _safe_auc(scored.y, gp_predict_proba(state, scored.X))
        rows.append({
            "method": method,
            "seed": seed,
            "converged": res.converged,
            "iterations": res.iterations,
            "elbo_mc": mean,
            "elbo_mc_se": se,
            "kl_mc_fwd": kl_fwd,
            "kl_mc_rev": kl_rev,
            "mse": mse,
            "coverage": cov,
            "ci_width": width,
            "auc": test_auc,
            "wall_time_s": res.wall_time,
            "error": None,
        })
    return rows


class _LogisticSimRepeat:
    def __init__(self, config):
        self.config = config

    def __call__(self, r):
        cfg = self.config
        seed = cfg.base_seed + r
        sim = cfg.sim
        spec = LogisticSimSpec(
            n=int(sim.get("n", 1000)),
            p=int(sim.get("p", 25)),
            setting=int(sim.get("setting", 3)),
            seed=seed,
        )
        data, _ = gen_logistic(spec)
        return _logistic_rows(cfg, data, seed)


class _GPToyRepeat:
    def __init__(self, config):
        self.config = config

    def __call__(self, r):
        cfg = self.config
        seed = cfg.base_seed + r
        sim = cfg.sim
        spec = GPToySpec(
            n_train=int(sim.get("n_train", 50)),
            n_test=int(sim.get("n_test", 50)),
            seed=seed,
        )
        train, test = gen_gp_toy(spec)
        return _gp_rows(cfg, train, test, seed)


class _FitFileRepeat:
    def __init__(self, config, train, test):
        self.config = config
        self.train = train
        self.test = test

    def __call__(self, r):
        cfg = self.config
        seed = cfg.base_seed + r
        if cfg.model == "logistic":
            return _logistic_rows(cfg, self.train, seed, test=self.test)
        return _gp_rows(cfg, self.train, self.test, seed)


def _run_fit_task(config, repeat_fn, task, extra_config=None):
    t_start = time.perf_counter()
    rows = _map_repeats(repeat_fn, config)
    report = {
        "schema_version": SCHEMA_VERSION,
        "library_version": __version__,
        "task": task,
        "config": _config_echo(config),
        "runs": rows,
        "summary": _summarize(rows),
        "n_nonconverged": sum(1 for r in rows if not r["converged"]),
        "total_wall_time_s": time.perf_counter() - t_start,
    }
    if extra_config:
        report["config"].update(extra_config)
    _write_report(report, config, _FIT_CSV_COLUMNS, rows)
    return report


def run_logistic_sim(config: ExperimentConfig):
    """Repeated synthetic logistic-regression study; returns the report."""
    return _run_fit_task(config, _LogisticSimRepeat(config), "logistic-sim")


def run_gp_toy(config: ExperimentConfig):
    """Repeated 1-d GP classification study; returns the report."""
    return _run_fit_task(config, _GPToyRepeat(config), "gp-toy")


def run_fit_file(config: ExperimentConfig):
    """Fit an external LIBSVM dataset with a deterministic 80/20 split."""
    if not config.data_path:
        raise UsageError("fit-file requires data_path")
    try:
        data = load_libsvm(config.data_path)
    except OSError as e:
        raise DataError(f"cannot read {config.data_path}: {e}") from e
    except ValueError as e:
        raise DataError(str(e)) from e
    train, test = train_test_split(data, config.train_fraction)
    return _run_fit_task(config, _FitFileRepeat(config, train, test), "fit-file")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="softplusvi", description=__doc__.splitlines()[0])
    parser.add_argument("task", choices=_TASKS)
    parser.add_argument("--config", help="path to a JSON config file")
    parser.add_argument("--output", help="output base path (overrides config)")
    parser.add_argument("--seed", type=int, help="base seed (overrides config)")
    parser.add_argument("--repeats", type=int, help="number of repeats (overrides config)")
    parser.add_argument("--methods", help="comma-separated subset of viper,vipg,vimc")
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        config, grid = _load_config(args.task, args)
        if config.task == "bound-grid":
            run_bound_grid(
                _grid_values(grid["theta"], "theta"),
                _grid_values(grid["tau"], "tau"),
                grid["l_list"] or [12],
                config.output_path,
                config.output_format,
                quad_nodes=int(grid["quad_nodes"] or 200),
            )
            return 0
        if config.task == "logistic-sim":
            report = run_logistic_sim(config)
        elif config.task == "gp-toy":
            report = run_gp_toy(config)
        else:
            report = run_fit_file(config)
        if report["n_nonconverged"] and not config.allow_nonconverged:
            print(
                f"{report['n_nonconverged']} fit(s) did not converge",
                file=sys.stderr,
            )
            return 3
        return 0
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
