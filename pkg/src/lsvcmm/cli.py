"""Command-line front end: ``lsvcmm fit | bootstrap | simulate | bench``.

Every command takes an optional JSON config whose keys are the
:class:`RunConfig` fields; command-line flags override config values.
Exit status is 0 on success, 1 on numerical failure and 2 on bad input or
configuration.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import inference, selection, simulation
from .core import DataError, NumericalError, TimeGrid
from .serialization import (
    coefficient_rows,
    dump_json,
    load_json,
    model_from_dict,
    model_to_dict,
    read_counts_clr,
    read_long_csv,
    write_long_csv,
    write_table,
)

logger = logging.getLogger("lsvcmm")

EXIT_OK, EXIT_NUMERICAL, EXIT_INPUT = 0, 1, 2


@dataclass(frozen=True)
class RunConfig:
    input: str | None = None
    output: str = "."
    subject: str = "subject_id"
    time: str = "time"
    response: str = "response"
    covariates: tuple | None = None
    unpenalized: tuple = ("intercept",)
    add_intercept: bool = True
    counts: str | None = None
    taxon: str | None = None
    clr: bool = False
    pseudocount: float = 0.5
    grid: tuple | None = None
    h_grid: tuple | None = None
    family: str = "cs"
    alpha: float = 0.5
    gamma: float = 1.0
    n_lambda: int = 30
    lambda_min_ratio: float = 1e-3
    gamma_ebic: float = 1.0
    df_kind: str = "count"
    ebic_n: str = "observations"
    covariance_cycles: int = 2
    tol: float = 1e-6
    max_iter: int = 5000
    model: str | None = None
    n_boot: int = 1000
    level: float = 0.95
    band_mode: str = "sup-t"
    scenario: str = "regular-missing"
    n_subjects: int = 100
    sigma2: float = 1.0
    ratio: float = 1.0
    obs_per_subject: int | None = None
    below_cutoff: bool = False
    experiment: str = "sigma2"
    values: tuple | None = None
    methods: tuple = simulation.METHODS
    n_reps: int = 10
    h: float = 0.2
    seed: int | None = None
    threads: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise DataError(f"unknown config key(s): {', '.join(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def echo(self) -> dict:
        """Settings recorded in outputs; the output location and worker count
        do not affect results and are left out."""
        d = self.to_dict()
        del d["output"], d["threads"]
        return d


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _names(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _add_common(p):
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", dest="output", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data(p):
    p.add_argument("--input", help="long-format CSV")
    p.add_argument("--subject")
    p.add_argument("--time")
    p.add_argument("--response")
    p.add_argument("--covariates", type=_names, help="comma-separated covariate columns")
    p.add_argument("--unpenalized", type=_names, help="comma-separated covariates left unpenalized")
    p.add_argument("--no-intercept", dest="add_intercept", action="store_const", const=False)
    p.add_argument("--counts", help="CSV of counts (subject, time, one column per taxon)")
    p.add_argument("--taxon", help="counts column used as response after the CLR transform")
    p.add_argument("--clr", action="store_const", const=True)
    p.add_argument("--pseudocount", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsvcmm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the regularization path and select by EBIC")
    _add_common(p)
    _add_data(p)
    p.add_argument("--grid", type=_floats, help="comma-separated estimation grid (default: observed times)")
    p.add_argument("--h", dest="h_grid", type=_floats, help="comma-separated kernel scales")
    p.add_argument("--family", choices=["independent", "cs", "ar1"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float, help="adaptive weight exponent")
    p.add_argument("--n-lambda", type=int)
    p.add_argument("--lambda-min-ratio", type=float)
    p.add_argument("--gamma-ebic", type=float)
    p.add_argument("--df-kind", choices=["effective", "count"])
    p.add_argument("--ebic-n", choices=["subjects", "observations"])
    p.add_argument("--covariance-cycles", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)

    p = sub.add_parser("bootstrap", help="sup-t bands and p-values around a fitted model")
    _add_common(p)
    _add_data(p)
    p.add_argument("--model", help="model.json written by fit (default: <out>/model.json)")
    p.add_argument("--n-boot", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--mode", dest="band_mode", choices=["sup-t", "bonferroni"])

    p = sub.add_parser("simulate", help="write a synthetic dataset and its truth")
    _add_common(p)
    _add_scenario(p)

    p = sub.add_parser("bench", help="compare methods over one scenario knob")
    _add_common(p)
    _add_scenario(p)
    p.add_argument("--experiment", choices=["sigma2", "missingness", "ratio", "n_subjects"])
    p.add_argument("--values", type=_floats)
    p.add_argument("--methods", type=_names)
    p.add_argument("--n-reps", type=int)
    p.add_argument("--h", type=float, help="kernel scale of the smoothing methods")
    p.add_argument("--alpha", type=float)
    p.add_argument("--n-lambda", type=int)
    return parser


def _add_scenario(p):
    p.add_argument("--scenario", choices=list(simulation.SCENARIOS))
    p.add_argument("--n-subjects", type=int)
    p.add_argument("--sigma2", type=float)
    p.add_argument("--ratio", type=float)
    p.add_argument("--obs-per-subject", type=int)
    p.add_argument("--below-cutoff", action="store_const", const=True)


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        d = load_json(args.config)
        if not isinstance(d, dict):
            raise DataError(f"{args.config}: config must be a JSON object")
        cfg = RunConfig.from_dict(d)
    known = {f.name for f in fields(RunConfig)}
    overrides = {k: v for k, v in vars(args).items() if k in known and v is not None}
    cfg = replace(cfg, **overrides)
    if cfg.seed is None:
        cfg = replace(cfg, seed=int(np.random.SeedSequence().entropy % 2**63))
    if cfg.threads < 1:
        raise DataError("threads must be at least 1")
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_dataset(cfg: RunConfig):
    if cfg.input is None:
        raise DataError("no input file given (--input or config key 'input')")
    override = None
    if cfg.counts is not None or cfg.clr:
        if not (cfg.counts and cfg.clr and cfg.taxon):
            raise DataError("compositional input needs --counts, --taxon and --clr together")
        override = read_counts_clr(cfg.counts, cfg.subject, cfg.time, cfg.taxon, cfg.pseudocount)
    return read_long_csv(cfg.input, cfg.subject, cfg.time, cfg.response, cfg.covariates, cfg.add_intercept, override)


def _mask(dataset, cfg: RunConfig):
    names = list(dataset.covariate_names)
    for n in cfg.unpenalized:
        if n not in names and not (n == "intercept" and not cfg.add_intercept):
            raise DataError(f"unpenalized covariate {n!r} is not a covariate; covariates: {', '.join(names)}")
    return tuple(n not in cfg.unpenalized for n in names)


def cmd_fit(cfg: RunConfig) -> int:
    ds = load_dataset(cfg)
    grid = ds.default_grid() if cfg.grid is None else TimeGrid(np.array(cfg.grid, dtype=float))
    pc = selection.PathConfig(
        family=cfg.family, alpha=cfg.alpha, gamma=cfg.gamma, mask=_mask(ds, cfg), gamma_ebic=cfg.gamma_ebic,
        covariance_cycles=cfg.covariance_cycles, tol=cfg.tol, max_iter=cfg.max_iter, df_kind=cfg.df_kind,
        ebic_n=cfg.ebic_n,
    )
    path = selection.fit_path(ds, grid, cfg.h_grid, cfg.n_lambda, cfg.lambda_min_ratio, pc, threads=cfg.threads)
    best = path.best
    out = _out_dir(cfg)
    names = ds.covariate_names
    write_table(out / "coefficients.csv", ["covariate", "grid_time", "estimate", "is_zero"],
                coefficient_rows(best.fit.B, names))
    write_table(out / "path.csv", ["h", "lambda", "df", "edf", "ebic", "selected"],
                [[r["h"], r["lambda"], r["df"], r["edf"], r["ebic"], r["selected"]] for r in path.table()])
    extra = {"h": best.h, "lambda": best.lam, "df": best.df, "edf": best.edf, "ebic": best.ebic,
             "config": cfg.echo(), "seed": cfg.seed}
    dump_json(out / "model.json", model_to_dict(best.fit, names, extra))
    if not best.fit.converged:
        logger.warning("selected fit did not reach the convergence tolerance")
    return EXIT_OK


def cmd_bootstrap(cfg: RunConfig) -> int:
    model_path = Path(cfg.model) if cfg.model else Path(cfg.output) / "model.json"
    d = load_json(model_path)
    fit, names = model_from_dict(d)
    if cfg.input is None and "config" in d:
        saved = d["config"]
        keep = ("input", "subject", "time", "response", "covariates", "add_intercept", "counts", "taxon", "clr",
                "pseudocount")
        cfg = replace(cfg, **{k: tuple(saved[k]) if isinstance(saved[k], list) else saved[k] for k in keep if k in saved})
    ds = load_dataset(cfg)
    if list(ds.covariate_names) != names:
        raise DataError(f"data covariates {list(ds.covariate_names)} do not match the model's {names}")
    bands = inference.bootstrap_bands(
        ds, fit, cfg.n_boot, cfg.level, cfg.seed, cfg.threads, cfg.band_mode, cfg.max_iter, cfg.tol,
        cfg.covariance_cycles,
    )
    out = _out_dir(cfg)
    rows = []
    excl = bands.excludes_zero
    for j, name in enumerate(names):
        for s, t in enumerate(fit.grid.points):
            rows.append([name, t, bands.estimate[j, s], bands.se[j, s], bands.lower[j, s], bands.upper[j, s],
                         excl[j, s]])
    write_table(out / "bands.csv", ["covariate", "grid_time", "estimate", "se", "lower", "upper", "excludes_zero"], rows)
    write_table(
        out / "pvalues.csv", ["covariate", "p_value", "multiplier", "level", "n_boot", "n_failed", "seed"],
        [[name, bands.p_values[j], bands.multipliers[j], bands.level, bands.n_boot, bands.n_failed, bands.seed]
         for j, name in enumerate(names)],
    )
    return EXIT_OK


def _scenario(cfg: RunConfig) -> simulation.ScenarioParams:
    return simulation.ScenarioParams(
        cfg.scenario, cfg.n_subjects, cfg.sigma2, cfg.ratio, cfg.obs_per_subject, below_cutoff=cfg.below_cutoff
    )


def cmd_simulate(cfg: RunConfig) -> int:
    ds, truth = simulation.generate(_scenario(cfg), cfg.seed)
    out = _out_dir(cfg)
    write_long_csv(out / "data.csv", ds, covariates=["group"])
    write_table(out / "truth.csv", ["grid_time", "beta0", "beta1"],
                zip(truth.grid.points, truth.beta0, truth.beta1))
    dump_json(out / "simulate.json", {"config": cfg.echo(), "seed": cfg.seed})
    return EXIT_OK


BENCH_COLUMNS = ("scenario", "experiment", "setting", "replicate", "method", "mae", "accuracy", "tpr", "fdr", "h",
                 "lam", "df", "error")


def cmd_bench(cfg: RunConfig) -> int:
    rows = simulation.run_experiment(
        cfg.scenario, cfg.experiment, cfg.values, cfg.methods, cfg.n_reps, cfg.seed, _scenario(cfg), cfg.h,
        cfg.n_lambda, cfg.alpha, cfg.threads,
    )
    out = _out_dir(cfg)
    write_table(out / "results.csv", BENCH_COLUMNS, ([r[c] for c in BENCH_COLUMNS] for r in rows))
    dump_json(out / "bench.json", {"config": cfg.echo(), "seed": cfg.seed})
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "bootstrap": cmd_bootstrap, "simulate": cmd_simulate, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except NumericalError as exc:
        print(f"lsvcmm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ValueError, TypeError) as exc:
        print(f"lsvcmm: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
