"""Builds per-stratum model inputs from a sample and runs all variable fits."""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, DataError
from .frame import CalibrationSpec, SampleSet
from .hb import (
    BinaryHBInput,
    GaussianFHInput,
    McmcConfig,
    PosteriorDraws,
    StratumDraws,
    compute_psi,
    draws_to_domain_totals,
    fit_binary_hb,
    fit_gaussian_fh,
)

# Continuous variables are modelled as stratum means and scaled by the
# stratum population size when aggregated to domain totals.
CONTINUOUS_SCALE_NOTE = "stratum_means_scaled_by_population_size"


def _covariate_matrix(
    sample: SampleSet,
    model: ModelConfig,
    strata_covariates: dict[str, np.ndarray],
) -> np.ndarray:
    H = len(sample.strata)
    columns = [np.ones(H)]
    for name in model.covariates:
        if name not in strata_covariates:
            raise ConfigError(
                f"model for {model.variable!r} references unknown stratum "
                f"covariate {name!r}"
            )
        column = np.asarray(strata_covariates[name], dtype=float)
        if column.shape != (H,):
            raise DataError(
                f"stratum covariate {name!r} has {column.shape[0]} rows, "
                f"sample has {H} strata"
            )
        columns.append(column)
    return np.column_stack(columns)


def fit_variable(
    sample: SampleSet,
    spec: CalibrationSpec,
    model: ModelConfig,
    strata_covariates: dict[str, np.ndarray],
    mcmc: McmcConfig,
    spawn_key: tuple[int, ...] = (),
) -> StratumDraws:
    """Fit the configured model for one calibration variable."""
    if model.variable not in spec.variable_names:
        raise ConfigError(
            f"model variable {model.variable!r} is not a calibration variable"
        )
    empty = [
        s.id
        for pos, s in enumerate(sample.strata)
        if sample.stratum_members(pos).size == 0
    ]
    if empty:
        raise DataError(f"strata without sampled records: {empty}")
    column = sample.calib[:, spec.variable_names.index(model.variable)]
    Z = _covariate_matrix(sample, model, strata_covariates)

    if model.kind == "binary":
        if not np.isin(column, (0.0, 1.0)).all():
            raise DataError(
                f"variable {model.variable!r} is not binary; found values "
                f"outside {{0, 1}}"
            )
        H = len(sample.strata)
        successes = np.zeros(H)
        for pos in range(H):
            successes[pos] = column[sample.stratum_members(pos)].sum()
        inputs = BinaryHBInput(
            successes=successes,
            sizes=sample.stratum_counts.astype(float),
            covariates=Z,
            prior_df=model.prior_df,
            prior_scale=model.prior_scale,
            fixed_sigma2=model.fixed_sigma2,
        )
        return fit_binary_hb(inputs, mcmc, spawn_key=spawn_key)

    if model.kind == "gaussian":
        ids, psi, psi_warnings = compute_psi(sample, model.variable, spec)
        if ids != sample.stratum_ids:
            raise DataError(
                f"variable {model.variable!r}: sampling variances cover "
                f"{len(ids)} of {len(sample.strata)} strata"
            )
        degenerate = [w for w in psi_warnings if "degenerate" in w]
        if degenerate:
            raise DataError(
                f"variable {model.variable!r}: zero sampling variance is not "
                f"usable in the measurement-error model ({'; '.join(degenerate)})"
            )
        estimates = np.array(
            [
                column[sample.stratum_members(pos)].mean()
                for pos in range(len(sample.strata))
            ]
        )
        inputs = GaussianFHInput(
            estimates=estimates,
            sampling_variances=psi,
            covariates=Z,
            prior_df=model.prior_df,
            prior_scale=model.prior_scale,
            fixed_sigma2=model.fixed_sigma2,
        )
        return fit_gaussian_fh(inputs, mcmc, spawn_key=spawn_key)

    raise ConfigError(f"unknown model kind {model.kind!r}")


def fit_all_variables(
    sample: SampleSet,
    spec: CalibrationSpec,
    models: dict[str, ModelConfig],
    strata_covariates: dict[str, np.ndarray],
    mcmc: McmcConfig,
    base_key: tuple[int, ...] = (),
) -> tuple[PosteriorDraws, dict[str, StratumDraws], tuple[str, ...]]:
    """Fit every calibration variable and aggregate to domain totals.

    Chain streams are addressed by (seed, *base_key, variable index, chain),
    so results are reproducible under any execution order.
    """
    missing = [v for v in spec.variable_names if v not in models]
    if missing:
        raise ConfigError(f"no model configured for variables {missing}")
    stratum_draws: dict[str, StratumDraws] = {}
    warnings: list[str] = []
    for v, name in enumerate(spec.variable_names):
        result = fit_variable(
            sample,
            spec,
            models[name],
            strata_covariates,
            mcmc,
            spawn_key=(*base_key, v),
        )
        stratum_draws[name] = result
        warnings.extend(f"{name}: {w}" for w in result.warnings)
    totals = draws_to_domain_totals(stratum_draws, sample, spec)
    return totals, stratum_draws, tuple(warnings)
