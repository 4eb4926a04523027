"""Hierarchical Bayes samplers for stratum-level small area models.

Two models are fitted with bespoke samplers:

* a logit-normal binomial model for binary variables, sampled by
  Metropolis-within-Gibbs (random-walk proposals on the regression
  coefficients and stratum effects, conjugate scaled-inverse-chi-square
  update for the effect variance), and
* a Gaussian measurement-error model for continuous variables with known
  per-stratum sampling variances, sampled by full-conditional Gibbs.

Stratum-level draws are aggregated to domain totals in the block layout of
the calibration system; externally produced draw matrices are accepted as a
first-class alternative (see :mod:`postcal.io`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DataError, NumericalError
from .frame import CalibrationSpec, SampleSet

# Random-walk scales adapt toward this acceptance band during burn-in.
_ACCEPT_LOW = 0.2
_ACCEPT_HIGH = 0.5
_ADAPT_WINDOW = 50


@dataclass(frozen=True)
class McmcConfig:
    """Chain layout and seeding; B = chains * iterations draws are retained."""

    burnin: int = 1000
    iterations: int = 5000
    chains: int = 3
    seed: int = 0
    proposal_sd: float = 0.5

    def __post_init__(self):
        if self.burnin < 0:
            raise DataError("burnin must be >= 0")
        if self.iterations < 1:
            raise DataError("iterations must be >= 1")
        if self.chains < 1:
            raise DataError("chains must be >= 1")
        if not self.proposal_sd > 0:
            raise DataError("proposal_sd must be > 0")


@dataclass(frozen=True)
class BinaryHBInput:
    """Per-stratum binomial counts with stratum-level covariates.

    ``fixed_sigma2`` pins the stratum-effect variance instead of sampling it;
    zero disables the stratum effects entirely.  A single stratum is allowed
    only in that pinned mode, because the free hierarchical variance is not
    identifiable from one stratum.
    """

    successes: np.ndarray
    sizes: np.ndarray
    covariates: np.ndarray
    prior_df: float = 1.0
    prior_scale: float = 1.0
    fixed_sigma2: float | None = None

    def __post_init__(self):
        m = np.asarray(self.successes)
        n = np.asarray(self.sizes)
        z = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        if z.shape[0] != m.shape[0]:
            z = z.T
        object.__setattr__(self, "successes", m.astype(float))
        object.__setattr__(self, "sizes", n.astype(float))
        object.__setattr__(self, "covariates", z)
        if m.shape != n.shape or m.ndim != 1:
            raise DataError("successes and sizes must be 1-d and aligned")
        if np.any(n < 1):
            raise DataError("every stratum needs sample size >= 1")
        if np.any((m < 0) | (m > n)):
            raise DataError("successes must satisfy 0 <= m_h <= n_h")
        if z.shape[0] != m.shape[0]:
            raise DataError("covariate rows must match the number of strata")
        if not (np.isfinite(z).all() and np.isfinite(m).all()):
            raise NumericalError("non-finite model inputs")
        if not (self.prior_df > 0 and self.prior_scale > 0):
            raise DataError("prior_df and prior_scale must be > 0")
        if self.fixed_sigma2 is None and m.shape[0] < 2:
            raise DataError(
                "at least 2 strata are required unless fixed_sigma2 is given"
            )

    @property
    def n_strata(self) -> int:
        return self.successes.shape[0]


@dataclass(frozen=True)
class GaussianFHInput:
    """Per-stratum direct estimates with known sampling variances."""

    estimates: np.ndarray
    sampling_variances: np.ndarray
    covariates: np.ndarray
    prior_df: float = 1.0
    prior_scale: float = 1.0
    fixed_sigma2: float | None = None

    def __post_init__(self):
        est = np.asarray(self.estimates, dtype=float)
        psi = np.asarray(self.sampling_variances, dtype=float)
        z = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        if z.shape[0] != est.shape[0]:
            z = z.T
        object.__setattr__(self, "estimates", est)
        object.__setattr__(self, "sampling_variances", psi)
        object.__setattr__(self, "covariates", z)
        if est.shape != psi.shape or est.ndim != 1:
            raise DataError("estimates and sampling variances must align")
        if np.any(psi <= 0):
            bad = np.nonzero(psi <= 0)[0].tolist()
            raise DataError(f"sampling variances must be > 0 (strata {bad})")
        if z.shape[0] != est.shape[0]:
            raise DataError("covariate rows must match the number of strata")
        if not (np.isfinite(z).all() and np.isfinite(est).all()):
            raise NumericalError("non-finite model inputs")
        if not (self.prior_df > 0 and self.prior_scale > 0):
            raise DataError("prior_df and prior_scale must be > 0")
        if self.fixed_sigma2 is not None and not self.fixed_sigma2 > 0:
            raise DataError("fixed_sigma2 must be > 0 for the Gaussian model")
        if self.fixed_sigma2 is None and est.shape[0] < 2:
            raise DataError(
                "at least 2 strata are required unless fixed_sigma2 is given"
            )

    @property
    def n_strata(self) -> int:
        return self.estimates.shape[0]


@dataclass(frozen=True)
class StratumDraws:
    """Retained post-burn-in draws of the stratum-level quantity.

    ``draws`` has one row per retained draw (all chains concatenated) and one
    column per stratum; rows carry p_h for the binary model and theta_h for
    the Gaussian model.
    """

    draws: np.ndarray
    chain_tags: np.ndarray
    beta_draws: np.ndarray
    sigma2_draws: np.ndarray
    acceptance: dict = field(default_factory=dict)
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class PosteriorDraws:
    """B x p matrix of domain-total draws in block order, chain tagged."""

    draws: np.ndarray
    chain_tags: np.ndarray

    def __post_init__(self):
        draws = np.asarray(self.draws, dtype=float)
        tags = np.asarray(self.chain_tags, dtype=int)
        object.__setattr__(self, "draws", draws)
        object.__setattr__(self, "chain_tags", tags)
        if draws.ndim != 2:
            raise DataError("draws must be a B x p matrix")
        if tags.shape != (draws.shape[0],):
            raise DataError("chain tags must align with draw rows")
        if not np.isfinite(draws).all():
            raise NumericalError("draw matrix contains non-finite entries")

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def p(self) -> int:
        return self.draws.shape[1]

    @cached_property
    def posterior_mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)


@dataclass(frozen=True)
class ConvergenceReport:
    """Gelman-Rubin potential scale reduction per parameter."""

    available: bool
    rhat: np.ndarray | None
    rhat_max: float | None
    reason: str = ""


def chain_rng(seed: int, *key: int) -> np.random.Generator:
    """Deterministic generator for a (seed, key...) address.

    The spawn-key scheme makes replication/chain streams independent and
    reproducible regardless of execution order.
    """
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def _binomial_loglik(eta: np.ndarray, m: np.ndarray, n: np.ndarray) -> np.ndarray:
    # log Binomial(m | n, expit(eta)) up to constants, stable for |eta| large
    return m * eta - n * np.logaddexp(0.0, eta)


_P_FLOOR = np.nextafter(0.0, 1.0)
_P_CEIL = np.nextafter(1.0, 0.0)


def _expit_open(eta: np.ndarray) -> np.ndarray:
    # overflow-free logistic clamped to the nearest representable values
    # inside (0, 1); extreme logits would otherwise round to exactly 0 or 1
    out = np.where(
        eta >= 0.0,
        1.0 / (1.0 + np.exp(-np.abs(eta))),
        np.exp(-np.abs(eta)) / (1.0 + np.exp(-np.abs(eta))),
    )
    return np.clip(out, _P_FLOOR, _P_CEIL)


def _draw_sigma2(
    rng: np.random.Generator, effects: np.ndarray, df: float, scale: float
) -> float:
    # scaled-inverse-chi-square posterior given iid N(0, sigma2) effects
    post_df = df + effects.shape[0]
    post_scale = (df * scale + float(effects @ effects)) / post_df
    return post_df * post_scale / float(rng.chisquare(post_df))


def _adapt(scale: np.ndarray, accepted: np.ndarray, proposed: int) -> None:
    rate = accepted / max(proposed, 1)
    scale[rate < _ACCEPT_LOW] *= 0.7
    scale[rate > _ACCEPT_HIGH] *= 1.4


def fit_binary_hb(
    model: BinaryHBInput,
    config: McmcConfig,
    spawn_key: tuple[int, ...] = (),
) -> StratumDraws:
    """Sample stratum success probabilities from the logit-normal model.

    Each chain owns its own generator stream derived from the seed and chain
    index, so results do not depend on chain execution order.  Proposal
    scales adapt toward a 20-50% acceptance rate during burn-in and are
    frozen afterwards.
    """
    m, n, Z = model.successes, model.sizes, model.covariates
    H, k = Z.shape[0], Z.shape[1]
    warnings = []
    if np.all(m == 0):
        warnings.append("degenerate input: no successes in any stratum")
    if np.all(m == n):
        warnings.append("degenerate input: all trials are successes")

    free_sigma = model.fixed_sigma2 is None
    use_effects = free_sigma or model.fixed_sigma2 > 0

    # empirical-logit start values shared by all chains
    p_hat = (m + 0.5) / (n + 1.0)
    eta_hat = np.log(p_hat / (1.0 - p_hat))
    beta0, *_ = np.linalg.lstsq(Z, eta_hat, rcond=None)

    all_p = []
    all_beta = []
    all_sigma2 = []
    tags = []
    accept_stats = {"beta": 0.0, "effects": 0.0}

    for chain in range(config.chains):
        rng = chain_rng(config.seed, *spawn_key, chain)
        beta = beta0.copy()
        v = np.clip(eta_hat - Z @ beta, -2.0, 2.0) if use_effects else np.zeros(H)
        sigma2 = (
            model.prior_scale if free_sigma else max(model.fixed_sigma2, 0.0)
        )
        beta_scale = np.full(k, config.proposal_sd)
        v_scale = np.full(H, config.proposal_sd)
        beta_acc = np.zeros(k)
        v_acc = np.zeros(H)
        window = 0

        eta = Z @ beta + v
        loglik = _binomial_loglik(eta, m, n)
        if not np.isfinite(loglik).all():
            raise NumericalError("non-finite log-posterior at initial state")

        total = config.burnin + config.iterations
        kept_p = np.empty((config.iterations, H))
        kept_beta = np.empty((config.iterations, k))
        kept_sigma2 = np.empty(config.iterations)
        beta_acc_keep = 0.0
        v_acc_keep = 0.0

        for it in range(total):
            in_burnin = it < config.burnin
            # regression coefficients: coordinate-wise random walk
            for j in range(k):
                prop = beta.copy()
                prop[j] += beta_scale[j] * rng.standard_normal()
                eta_prop = eta + Z[:, j] * (prop[j] - beta[j])
                loglik_prop = _binomial_loglik(eta_prop, m, n)
                delta = float(loglik_prop.sum() - loglik.sum())
                if np.log(rng.uniform()) < delta:
                    beta, eta, loglik = prop, eta_prop, loglik_prop
                    beta_acc[j] += 1
                    if not in_burnin:
                        beta_acc_keep += 1.0 / k
            # stratum effects: simultaneous independent random walks
            if use_effects and sigma2 > 0:
                v_prop = v + v_scale * rng.standard_normal(H)
                eta_prop = eta + (v_prop - v)
                loglik_prop = _binomial_loglik(eta_prop, m, n)
                delta = (
                    loglik_prop
                    - loglik
                    - (v_prop**2 - v**2) / (2.0 * sigma2)
                )
                accept = np.log(rng.uniform(size=H)) < delta
                v = np.where(accept, v_prop, v)
                eta = np.where(accept, eta_prop, eta)
                loglik = np.where(accept, loglik_prop, loglik)
                v_acc += accept
                if not in_burnin:
                    v_acc_keep += accept.mean()
            if free_sigma:
                sigma2 = _draw_sigma2(rng, v, model.prior_df, model.prior_scale)

            window += 1
            if in_burnin and window == _ADAPT_WINDOW:
                _adapt(beta_scale, beta_acc, _ADAPT_WINDOW)
                _adapt(v_scale, v_acc, _ADAPT_WINDOW)
                beta_acc[:] = 0.0
                v_acc[:] = 0.0
                window = 0
            if not np.isfinite(loglik).all():
                raise NumericalError("non-finite log-posterior during sampling")

            if not in_burnin:
                keep = it - config.burnin
                kept_p[keep] = _expit_open(eta)
                kept_beta[keep] = beta
                kept_sigma2[keep] = sigma2

        all_p.append(kept_p)
        all_beta.append(kept_beta)
        all_sigma2.append(kept_sigma2)
        tags.append(np.full(config.iterations, chain))
        accept_stats["beta"] += beta_acc_keep / config.iterations / config.chains
        accept_stats["effects"] += v_acc_keep / config.iterations / config.chains

    return StratumDraws(
        draws=np.vstack(all_p),
        chain_tags=np.concatenate(tags),
        beta_draws=np.vstack(all_beta),
        sigma2_draws=np.concatenate(all_sigma2),
        acceptance=accept_stats,
        warnings=tuple(warnings),
    )


def _collinear_columns(Z: np.ndarray) -> list[int]:
    # pivoted QR: columns beyond the numerical rank are the dependent ones
    from scipy.linalg import qr

    _, r, piv = qr(Z, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(Z.shape) * np.finfo(float).eps * (diag.max() if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    return sorted(int(j) for j in piv[rank:])


def fit_gaussian_fh(
    model: GaussianFHInput,
    config: McmcConfig,
    spawn_key: tuple[int, ...] = (),
) -> StratumDraws:
    """Gibbs sampler for the Gaussian measurement-error model.

    Full conditionals: theta_h is Gaussian with precision 1/psi_h + 1/sigma2
    (the shrinkage form), beta is Gaussian under a flat prior, and sigma2 is
    scaled-inverse-chi-square.
    """
    est, psi, Z = model.estimates, model.sampling_variances, model.covariates
    H, k = Z.shape[0], Z.shape[1]

    ztz = Z.T @ Z
    if np.linalg.matrix_rank(ztz) < k:
        cols = _collinear_columns(Z)
        raise DataError(
            f"covariate cross-product is singular; collinear columns {cols}"
        )
    ztz_inv = np.linalg.inv(ztz)
    ztz_inv_chol = np.linalg.cholesky(ztz_inv)

    free_sigma = model.fixed_sigma2 is None
    all_theta = []
    all_beta = []
    all_sigma2 = []
    tags = []

    for chain in range(config.chains):
        rng = chain_rng(config.seed, *spawn_key, chain)
        theta = est.copy()
        beta = ztz_inv @ (Z.T @ theta)
        sigma2 = model.prior_scale if free_sigma else float(model.fixed_sigma2)

        total = config.burnin + config.iterations
        kept_theta = np.empty((config.iterations, H))
        kept_beta = np.empty((config.iterations, k))
        kept_sigma2 = np.empty(config.iterations)

        for it in range(total):
            synthetic = Z @ beta
            prec = 1.0 / psi + 1.0 / sigma2
            mean = (est / psi + synthetic / sigma2) / prec
            theta = mean + rng.standard_normal(H) / np.sqrt(prec)

            beta_hat = ztz_inv @ (Z.T @ theta)
            beta = beta_hat + np.sqrt(sigma2) * (
                ztz_inv_chol @ rng.standard_normal(k)
            )

            if free_sigma:
                sigma2 = _draw_sigma2(
                    rng, theta - Z @ beta, model.prior_df, model.prior_scale
                )

            if it >= config.burnin:
                keep = it - config.burnin
                kept_theta[keep] = theta
                kept_beta[keep] = beta
                kept_sigma2[keep] = sigma2

        all_theta.append(kept_theta)
        all_beta.append(kept_beta)
        all_sigma2.append(kept_sigma2)
        tags.append(np.full(config.iterations, chain))

    return StratumDraws(
        draws=np.vstack(all_theta),
        chain_tags=np.concatenate(tags),
        beta_draws=np.vstack(all_beta),
        sigma2_draws=np.concatenate(all_sigma2),
    )


def compute_psi(
    sample: SampleSet, variable: str, spec: CalibrationSpec
) -> tuple[tuple[str, ...], np.ndarray, tuple[str, ...]]:
    """Known sampling variances deff * (1 - f) * S^2 / n per sampled stratum.

    Returns (stratum ids, psi values, degeneracy warnings) for the strata
    present in the sample, in frame order.  S^2 is the within-stratum sample
    variance with divisor n_h - 1, and f the stratum sampling fraction.
    """
    if variable in spec.variable_names:
        column = sample.calib[:, spec.variable_names.index(variable)]
    elif variable in sample.outcomes:
        column = sample.outcomes[variable]
    else:
        raise DataError(f"unknown variable {variable!r}")

    ids = []
    psi = []
    warnings = []
    too_small = []
    for pos, stratum in enumerate(sample.strata):
        members = sample.stratum_members(pos)
        if members.size == 0:
            continue
        if members.size < 2:
            too_small.append(stratum.id)
            continue
        s2 = float(np.var(column[members], ddof=1))
        fpc = 1.0 - sample.sampling_fractions[pos]
        value = stratum.deff * fpc * s2 / members.size
        if value == 0.0:
            reason = "census stratum" if fpc == 0.0 else "constant variable"
            warnings.append(
                f"stratum {stratum.id!r}: degenerate sampling variance ({reason})"
            )
        ids.append(stratum.id)
        psi.append(value)
    if too_small:
        raise DataError(
            f"variable {variable!r}: sampling variance needs n_h >= 2 in "
            f"strata {too_small}"
        )
    return tuple(ids), np.array(psi), tuple(warnings)


def stratum_domain_map(sample: SampleSet) -> dict[str, str]:
    """Domain of each sampled stratum; errors if a stratum is unassigned.

    A stratum must contain records from exactly one domain to contribute to
    domain totals.
    """
    mapping: dict[str, str] = {}
    for pos, stratum in enumerate(sample.strata):
        members = sample.stratum_members(pos)
        if members.size == 0:
            raise DataError(f"stratum {stratum.id!r} has no domain assignment")
        domains = {sample.records[i].domain for i in (int(j) for j in members)}
        if len(domains) > 1:
            raise DataError(
                f"stratum {stratum.id!r} spans multiple domains {sorted(domains)}"
            )
        mapping[stratum.id] = domains.pop()
    return mapping


def draws_to_domain_totals(
    stratum_draws: dict[str, StratumDraws],
    sample: SampleSet,
    spec: CalibrationSpec,
) -> PosteriorDraws:
    """Aggregate stratum draws into the p-vector of domain-total draws.

    Binary draws (p_h) and Gaussian draws of stratum means (theta_h) both
    scale by the stratum population size: the domain total draw is
    sum over strata in the domain of N_h * draw_h.
    """
    missing = [v for v in spec.variable_names if v not in stratum_draws]
    if missing:
        raise DataError(f"missing stratum draws for variables {missing}")
    domain_of = stratum_domain_map(sample)
    ids = sample.stratum_ids
    sizes = sample.stratum_sizes

    tags = None
    n_draws = None
    for name in spec.variable_names:
        d = stratum_draws[name]
        if d.draws.shape[1] != len(ids):
            raise DataError(
                f"variable {name!r}: draws cover {d.draws.shape[1]} strata, "
                f"sample has {len(ids)}"
            )
        if tags is None:
            tags = d.chain_tags
            n_draws = d.draws.shape[0]
        elif d.draws.shape[0] != n_draws or not np.array_equal(d.chain_tags, tags):
            raise DataError("stratum draws disagree on chain layout")

    totals = np.zeros((n_draws, spec.p))
    for v, name in enumerate(spec.variable_names):
        scaled = stratum_draws[name].draws * sizes[None, :]
        for pos, stratum_id in enumerate(ids):
            d = spec.domain_position(domain_of[stratum_id])
            totals[:, v * spec.n_domains + d] += scaled[:, pos]
    return PosteriorDraws(draws=totals, chain_tags=tags)


def gelman_rubin(draws: PosteriorDraws) -> ConvergenceReport:
    """Between/within potential scale reduction per parameter.

    Requires at least two chains; exact chain copies give R-hat of exactly 1
    (the statistic is floored at 1, its no-divergence value), and chains with
    disjoint support diverge to infinity.
    """
    chains = np.unique(draws.chain_tags)
    if chains.size < 2:
        return ConvergenceReport(
            available=False,
            rhat=None,
            rhat_max=None,
            reason="a single chain cannot support a between-chain diagnostic",
        )
    groups = [draws.draws[draws.chain_tags == c] for c in chains]
    length = min(g.shape[0] for g in groups)
    if length < 2:
        return ConvergenceReport(
            available=False,
            rhat=None,
            rhat_max=None,
            reason="need at least 2 iterations per chain",
        )
    stacked = np.stack([g[:length] for g in groups])  # M x L x p
    L = length
    within = stacked.var(axis=1, ddof=1).mean(axis=0)
    between = stacked.mean(axis=1).var(axis=0, ddof=1)
    rhat = np.ones(draws.p)
    pooled = (L - 1) / L * within + between
    positive = within > 0
    rhat[positive] = np.sqrt(
        np.maximum(pooled[positive] / within[positive], 1.0)
    )
    rhat[(~positive) & (between > 0)] = np.inf
    return ConvergenceReport(
        available=True, rhat=rhat, rhat_max=float(np.max(rhat))
    )
