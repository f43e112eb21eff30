import functools
import logging
import os
from typing import Optional, Tuple

import click
import numpy as np
import pandas as pd
from pydantic import ValidationError

from artifacts import ArtifactManager, artifact_manager
from config import TOOL_NAME, TOOL_VERSION, configure_logging
from dwols import FitOptions, StageSpec, fit_dwols
from errors import ConfigError, DtrError, IngestionError
from mnboot import mn_bootstrap
from recommend import PseudoCorrector, predict_one, predict_pooled, predict_true
from schemas import RunConfig
from simulate import generate_stard_like, run_coverage_study, run_prediction_study, run_study, scenario_config
from tabledesign import DataTable, ProxyGroup, TrialDataset, read_csv

logger = logging.getLogger(__name__)


def handle_errors(fn):
    """Map escaping errors to the exit codes 2 (config), 3 (data), 4 (numerical), 5 (internal)"""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DtrError as e:
            click.echo(f"error: {e}", err=True)
            raise SystemExit(e.exit_code)
        except ValidationError as e:
            first = e.errors()[0]
            where = ".".join(str(p) for p in first["loc"])
            click.echo(f"error: [config] {where}: {first['msg']}", err=True)
            raise SystemExit(ConfigError.exit_code)
        except click.ClickException:
            raise
        except Exception as e:
            logger.exception("Unexpected failure")
            click.echo(f"error: [internal] {e}", err=True)
            raise SystemExit(DtrError.exit_code)

    return wrapper


def shared_options(fn):
    options = [
        click.option("--config", "config_path", type=click.Path(), help="JSON run configuration"),
        click.option("--data", "data_path", type=click.Path(), help="Input CSV (overrides data.path)"),
        click.option("--out", "out_dir", type=click.Path(), help="Output directory"),
        click.option("--seed", type=int, help="Root seed (overrides config)"),
        click.option("--threads", type=click.IntRange(min=1), help="Worker threads"),
        click.option("--verbose", is_flag=True, help="Debug logging"),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


# Config plumbing

def load_config(path: Optional[str], seed: Optional[int] = None, threads: Optional[int] = None) -> RunConfig:
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                config = RunConfig.model_validate_json(fh.read())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    else:
        config = RunConfig()

    # Flags win over the file; sections without their own seed inherit the root seed
    update = {}
    if seed is not None:
        update["seed"] = seed
    if threads is not None:
        update["threads"] = threads
    config = config.model_copy(update=update)
    boot_update = {}
    if seed is not None or "seed" not in config.bootstrap.model_fields_set:
        boot_update["seed"] = config.seed
    if threads is not None or config.bootstrap.threads is None:
        boot_update["threads"] = config.threads
    return config.model_copy(update={"bootstrap": config.bootstrap.model_copy(update=boot_update)})


def proxy_groups(config: RunConfig):
    if config.data is None:
        return ()
    return tuple(
        ProxyGroup(tuple(g.covariates), tuple(tuple(p) for p in g.proxies), tuple(g.z_columns))
        for g in config.data.proxy_groups
    )


def load_table(config: RunConfig, data_path: Optional[str]) -> DataTable:
    path = data_path or (config.data.path if config.data else None)
    if not path:
        raise ConfigError("no input data: pass --data or set data.path")
    return read_csv(path)


def load_dataset(config: RunConfig, data_path: Optional[str]) -> TrialDataset:
    if config.data is None:
        raise ConfigError("config has no data section")
    data = config.data
    return TrialDataset(
        load_table(config, data_path),
        proxy_groups(config),
        tuple(data.treatment_columns),
        data.outcome_column,
        error_free=tuple(data.error_free_columns),
        oracle=tuple(data.oracle_columns),
        column_stage=dict(data.column_stage),
    )


def stage_specs(config: RunConfig) -> Tuple[StageSpec, ...]:
    if config.model is None or not config.model.stages:
        raise ConfigError("config has no model.stages")
    treatments = config.data.treatment_columns if config.data else []
    if len(treatments) != len(config.model.stages):
        raise ConfigError(
            f"{len(config.model.stages)} model stages but {len(treatments)} treatment columns"
        )
    return tuple(
        StageSpec.from_strings(j + 1, treatments[j], s.treatment, s.treatment_free, s.blip)
        for j, s in enumerate(config.model.stages)
    )


def fit_options(config: RunConfig) -> FitOptions:
    return FitOptions(
        formulation=config.model.formulation if config.model else "regret",
        calibrate=config.calibration.enabled,
        conditional_calibration=config.calibration.conditional,
        delta_scheme=config.calibration.delta_scheme,
    )


def manager_for(out_dir: Optional[str]) -> ArtifactManager:
    return ArtifactManager(out_dir) if out_dir else artifact_manager


# Commands

@click.group()
@click.version_option(TOOL_VERSION, prog_name=TOOL_NAME)
def cli():
    """Dynamic treatment regimes with error-prone covariates"""


@cli.command()
@shared_options
@handle_errors
def fit(config_path, data_path, out_dir, seed, threads, verbose):
    """Fit a K-stage dWOLS regime and write coefficients, rule and corrector"""
    configure_logging("DEBUG" if verbose else None)
    config = load_config(config_path, seed, threads)
    data = load_dataset(config, data_path)
    result = fit_dwols(data, stage_specs(config), fit_options(config))

    manager = manager_for(out_dir)
    manager.write_coefficients(result, "coefficients.csv", config.seed, config)
    manager.write_rule(result.rule(), "rule.json", result.formulation)
    if result.calibration:
        manager.write_corrector(PseudoCorrector.from_fit(result, data.proxy_groups), "corrector.txt")

    labels, values = result.estimates()
    for label, value in zip(labels, values):
        click.echo(f"{label}\t{value:.6f}")


@cli.command()
@shared_options
@handle_errors
def bootstrap(config_path, data_path, out_dir, seed, threads, verbose):
    """Adaptive m-out-of-n bootstrap intervals for the blip parameters"""
    configure_logging("DEBUG" if verbose else None)
    config = load_config(config_path, seed, threads)
    data = load_dataset(config, data_path)
    report = mn_bootstrap(data, stage_specs(config), config.bootstrap, fit_options(config))

    manager_for(out_dir).write_bootstrap(report, "bootstrap.csv", config.bootstrap.seed, config)
    click.echo(f"p_hat={report.p_hat:.4f} zeta_hat={report.zeta_hat:.3f} m={report.m} n={report.n}")
    for label, (lo, hi) in zip(report.labels, report.intervals):
        click.echo(f"{label}\t[{lo:.6f}, {hi:.6f}]")


@cli.command()
@shared_options
@click.option("--scenario", help="one-stage, multistage-1..5, coverage-1..3, prediction or stard-like")
@click.option("--n", "n_rows", type=click.IntRange(min=1), help="Patients per replicate")
@click.option("--replicates", type=click.IntRange(min=1), help="Number of replicates")
@click.option("--row", help="Row label of a multistage scenario table, e.g. '(0, 0)'")
@handle_errors
def simulate(config_path, data_path, out_dir, seed, threads, verbose, scenario, n_rows, replicates, row):
    """Run a simulation study, or write a synthetic dataset for stard-like"""
    configure_logging("DEBUG" if verbose else None)
    config = load_config(config_path, seed, threads)
    sim = config.simulate
    cfg = scenario_config(
        scenario or sim.scenario,
        **{
            **sim.overrides,
            "row": row or sim.row,
            "n": n_rows or sim.n,
            "replicates": replicates or sim.replicates,
            "seed": config.seed,
            "delta_scheme": config.calibration.delta_scheme,
        },
    )
    manager = manager_for(out_dir)
    extra = {"scenario": cfg.family + (f"-{cfg.number}" if cfg.number else ""), "n": cfg.n,
             "replicates": cfg.replicates}

    if cfg.family == "stard_like":
        dataset = generate_stard_like(cfg.n, cfg.seed)
        frame = dataset.table.to_frame()
        manager.write_summary(frame, "stard_like.csv", cfg.seed, config, extra)
        click.echo(f"wrote {cfg.n} synthetic patients")
        return
    if cfg.family == "coverage":
        summary = run_coverage_study(cfg, sim.methods, config.bootstrap, config.threads)
    elif cfg.family == "prediction":
        summary = run_prediction_study(cfg, sim.predict_n, config.threads)
    else:
        summary = run_study(cfg, threads=config.threads)
    if summary.failures:
        extra["failed_replicates"] = summary.failures
    frame = summary.to_frame()
    manager.write_summary(frame, "simulate.csv", cfg.seed, config, extra)
    click.echo(frame.to_string(index=False))


@cli.command()
@shared_options
@click.option("--mode", type=click.Choice(["one-at-a-time", "pooled", "true"]), help="Information regime")
@click.option("--corrector", "corrector_path", type=click.Path(), help="Frozen pseudo-corrector")
@click.option("--rule", "rule_path", type=click.Path(), help="Decision rule JSON written by fit")
@handle_errors
def predict(config_path, data_path, out_dir, seed, threads, verbose, mode, corrector_path, rule_path):
    """Recommend treatments for new patients"""
    configure_logging("DEBUG" if verbose else None)
    config = load_config(config_path, seed, threads)
    mode = mode or config.predict.mode
    corrector_path = corrector_path or config.predict.corrector_path
    rule_path = rule_path or config.predict.rule_path
    if mode == "one-at-a-time" and not corrector_path:
        raise ConfigError("predict --mode one-at-a-time needs a corrector (--corrector or predict.corrector_path)")
    if not rule_path:
        raise ConfigError("predict needs a decision rule (--rule or predict.rule_path)")
    if not os.path.exists(rule_path):
        raise IngestionError(f"decision rule {rule_path} does not exist")

    manager = manager_for(out_dir)
    rule = manager.read_rule(rule_path)
    patients = load_table(config, data_path)
    if mode == "one-at-a-time":
        corrector = manager.read_corrector(corrector_path)
        if config.predict.available_proxies is not None:
            corrector = corrector.with_available(
                {g.name: config.predict.available_proxies for g in corrector.groups}
            )
        decisions = predict_one(corrector, rule, patients)
    elif mode == "pooled":
        decisions = predict_pooled(rule, patients, proxy_groups(config), config.calibration.delta_scheme)
    else:
        decisions = predict_true(rule, patients)

    frame = pd.DataFrame(
        np.asarray(decisions, dtype=int),
        columns=[f"recommended_{s.treatment_column}" for s in rule.stages],
    )
    frame.insert(0, "row", np.arange(1, patients.n_rows + 1))
    manager.write_summary(frame, "predictions.csv", config.seed, config, {"mode": mode})
    click.echo(f"{mode}: recommended treatment for {patients.n_rows} patients")


if __name__ == "__main__":
    cli()
