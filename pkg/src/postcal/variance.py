"""Total-variance decomposition and calibrated Bayes intervals for cells.

The posterior-propagation interval of a filtered cell carries only the
uncertainty of the domain totals; the sampling variability of the
within-domain cell shares is invisible to it.  The calibrated Bayes interval
(CBI) restores it by combining

* component 1, the design-based Taylor-linearised variance of the calibrated
  cell shares, accumulated over strata with the known design effects and
  finite population corrections, and
* component 2, the model-based posterior variance of the domain totals,
  weighted by the squared shares,

around the point estimate with the fixed normal multiplier 1.96.  For cells
summing a non-calibration outcome, the share is formed against the
calibration variable most correlated with the outcome (the linking
variable), giving a ratio-type interval.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibratedWeights
from .errors import DataError, LinkSelectionError
from .frame import CalibrationSpec, CellData, SampleSet
from .hb import PosteriorDraws

CBI_Z = 1.96

# Operational cutoff for "the direction is essentially orthogonal to the
# posterior correction": below this the propagation interval collapses.
ORTHOGONALITY_COS_THRESHOLD = 0.01

# Linking correlations weaker than this make the ratio link uninformative;
# design-based direct estimation is the recommended primary interval.
WEAK_LINK_THRESHOLD = 0.1


@dataclass(frozen=True)
class DomainShareTerm:
    """Per-domain share of the cell with its design and posterior variances."""

    domain: str
    share: float
    share_variance: float
    posterior_variance: float
    domain_total: float
    excluded: bool = False


@dataclass(frozen=True)
class VarianceComponents:
    """Compositional (design) and domain (model) variance parts.

    component1 = sum_d total_d^2 * Var(share_d); component2 =
    sum_d share_d^2 * V_d.  The bookkeeping is exact: the total variance the
    interval uses is component1 + component2 as assembled here.
    """

    component1: float
    component2: float
    terms: tuple[DomainShareTerm, ...]
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class CbiInterval:
    """Symmetric normal-multiplier interval around the point estimate."""

    lower: float
    upper: float
    z: float
    components: VarianceComponents

    @property
    def width(self) -> float:
        return self.upper - self.lower


@dataclass(frozen=True)
class LinkCandidate:
    name: str
    correlation: float | None
    admissible: bool


@dataclass(frozen=True)
class RatioLink:
    """Chosen ratio denominator for a non-calibration outcome cell."""

    variable: str
    correlation: float
    candidates: tuple[LinkCandidate, ...]
    weak: bool


@dataclass(frozen=True)
class CellDiagnostics:
    """Pre-publication diagnostics for one cell.

    ``cos_theta`` is None when the direction or the posterior-mean residual
    is a zero vector, in which case alignment is undefined rather than zero.
    """

    a_norm: float
    cos_theta: float | None
    replicate_variance: float
    cv_cri: float
    cv_cbi: float | None
    orthogonality_flag: bool


def share_and_variance(
    sample: SampleSet,
    spec: CalibrationSpec,
    cell: CellData,
    weights: CalibratedWeights,
    denominator_variable: str,
    posterior_mean: np.ndarray,
) -> tuple[tuple[DomainShareTerm, ...], tuple[str, ...]]:
    """Calibrated cell shares per domain with Taylor-linearised variances.

    The share of domain d is the calibrated cell total within d divided by
    the posterior-mean domain total of the denominator variable; shares are
    computed once and held fixed across draws.  The denominator is a
    calibration constant, so the share variance is the design variance of
    the numerator total scaled by 1/total^2: it accumulates
    deff_h * N_h^2 * (1 - f_h) * s2_h / n_h over the strata intersecting the
    domain, where s2_h is the within-stratum sample variance of the
    cell-masked summed values over the whole stratum sample (equivalently,
    s2 taken on the stratum-expanded values N_h * z_i).

    Domains whose denominator total is zero are excluded with a warning when
    the cell intersects them; singleton strata contribute zero with a
    warning.
    """
    if denominator_variable not in spec.variable_names:
        raise DataError(
            f"denominator {denominator_variable!r} is not a calibration variable"
        )
    v = spec.variable_names.index(denominator_variable)
    D = spec.n_domains
    masked_values = cell.values * cell.mask

    terms = []
    warnings: list[str] = []
    flagged_singletons: set[str] = set()
    for d in range(D):
        domain_id = spec.domain_order[d]
        in_domain = sample.domain_idx == d
        total = float(posterior_mean[v * D + d])
        numerator = float(np.sum(masked_values[in_domain] * weights.weights[in_domain]))
        intersects = bool(np.any(cell.mask & in_domain))
        if total == 0.0:
            if intersects:
                warnings.append(
                    f"domain {domain_id!r} excluded: zero denominator total "
                    f"for {denominator_variable!r}"
                )
            terms.append(
                DomainShareTerm(
                    domain=domain_id,
                    share=0.0,
                    share_variance=0.0,
                    posterior_variance=0.0,
                    domain_total=0.0,
                    excluded=intersects,
                )
            )
            continue

        z = masked_values * in_domain
        variance = 0.0
        touching = np.unique(sample.stratum_idx[in_domain])
        for pos in touching:
            members = sample.stratum_members(int(pos))
            n_h = members.size
            if n_h < 2:
                stratum_id = sample.strata[int(pos)].id
                if stratum_id not in flagged_singletons:
                    flagged_singletons.add(stratum_id)
                    warnings.append(
                        f"stratum {stratum_id!r}: singleton, share-variance "
                        f"contribution set to 0"
                    )
                continue
            s2 = float(np.var(z[members], ddof=1))
            fpc = 1.0 - sample.sampling_fractions[int(pos)]
            N_h = sample.stratum_sizes[int(pos)]
            variance += (
                sample.stratum_deff[int(pos)] * N_h**2 * fpc * s2 / n_h
            )
        terms.append(
            DomainShareTerm(
                domain=domain_id,
                share=numerator / total,
                share_variance=variance / total**2,
                posterior_variance=0.0,
                domain_total=total,
            )
        )
    return tuple(terms), tuple(warnings)


def posterior_domain_variance(
    draws: PosteriorDraws, spec: CalibrationSpec, variable: str, domain: str
) -> float:
    """Sample variance of one domain-total column across the draws."""
    if draws.n_draws < 2:
        raise DataError("need at least 2 draws for a posterior variance")
    v = spec.variable_names.index(variable)
    d = spec.domain_position(domain)
    return float(np.var(draws.draws[:, v * spec.n_domains + d], ddof=1))


def variance_components(
    sample: SampleSet,
    spec: CalibrationSpec,
    cell: CellData,
    weights: CalibratedWeights,
    denominator_variable: str,
    posterior_mean: np.ndarray,
    draws: PosteriorDraws,
) -> VarianceComponents:
    """Assemble both variance components for one cell."""
    terms, warnings = share_and_variance(
        sample, spec, cell, weights, denominator_variable, posterior_mean
    )
    completed = []
    component1 = 0.0
    component2 = 0.0
    for term in terms:
        if term.excluded:
            completed.append(term)
            continue
        v_d = posterior_domain_variance(draws, spec, denominator_variable, term.domain)
        completed.append(
            DomainShareTerm(
                domain=term.domain,
                share=term.share,
                share_variance=term.share_variance,
                posterior_variance=v_d,
                domain_total=term.domain_total,
            )
        )
        component1 += term.domain_total**2 * term.share_variance
        component2 += term.share**2 * v_d
    return VarianceComponents(
        component1=component1,
        component2=component2,
        terms=tuple(completed),
        warnings=tuple(warnings),
    )


def cbi(point: float, components: VarianceComponents) -> CbiInterval:
    """Calibrated Bayes interval: point +/- 1.96 sqrt(comp1 + comp2)."""
    warnings = list(components.warnings)
    c1, c2 = components.component1, components.component2
    if c1 < 0 or c2 < 0:
        warnings.append("negative variance component clamped to 0")
        c1, c2 = max(c1, 0.0), max(c2, 0.0)
        components = VarianceComponents(
            component1=c1,
            component2=c2,
            terms=components.terms,
            warnings=tuple(warnings),
        )
    half = CBI_Z * float(np.sqrt(c1 + c2))
    return CbiInterval(
        lower=point - half, upper=point + half, z=CBI_Z, components=components
    )


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    if x.size < 2:
        return None
    sx = float(np.std(x))
    sy = float(np.std(y))
    if sx == 0.0 or sy == 0.0:
        return None
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


def select_linking_variable(
    sample: SampleSet,
    spec: CalibrationSpec,
    cell: CellData,
    weak_threshold: float = WEAK_LINK_THRESHOLD,
) -> RatioLink:
    """Pick the calibration variable most correlated with the cell outcome.

    Correlations are plain Pearson over the sampled records in the cell.
    Candidates structurally constant within the cell cannot serve as ratio
    denominators and are excluded regardless of formal correlation; ties
    break by declaration order.
    """
    idx = np.nonzero(cell.mask)[0]
    u = cell.values[idx]
    candidates = []
    best_name = None
    best_rho = None
    for v, name in enumerate(spec.variable_names):
        col = sample.calib[idx, v]
        constant = idx.size < 2 or float(np.ptp(col)) == 0.0
        if constant:
            candidates.append(
                LinkCandidate(name=name, correlation=None, admissible=False)
            )
            continue
        rho = _pearson(u, col)
        if rho is None:
            rho = 0.0  # outcome constant in the cell; no informative link
        candidates.append(
            LinkCandidate(name=name, correlation=rho, admissible=True)
        )
        if best_rho is None or abs(rho) > abs(best_rho):
            best_name, best_rho = name, rho
    if best_name is None:
        raise LinkSelectionError(
            "no admissible linking variable: every calibration variable is "
            "constant within the cell; publish a design-based direct estimate "
            "for this cell instead"
        )
    return RatioLink(
        variable=best_name,
        correlation=best_rho,
        candidates=tuple(candidates),
        weak=abs(best_rho) < weak_threshold,
    )


def coefficient_of_variation(width: float, point: float) -> float:
    """Interval width divided by 3.92, as a fraction of the point estimate."""
    if point == 0.0:
        return float("nan")
    return (width / (2.0 * CBI_Z)) / abs(point)


def cell_diagnostics(
    direction: np.ndarray,
    posterior_mean: np.ndarray,
    ht: np.ndarray,
    draws: PosteriorDraws,
    cri_width: float,
    cbi_width: float | None,
    point: float,
) -> CellDiagnostics:
    """Alignment and scale diagnostics explaining the propagation width.

    The replicate variance is the quadratic form a' Cov(draws) a, which must
    agree with the empirical variance of the replicate totals.
    """
    a_norm = float(np.linalg.norm(direction))
    residual = posterior_mean - ht
    r_norm = float(np.linalg.norm(residual))
    if a_norm == 0.0 or r_norm == 0.0:
        cos_theta = None
    else:
        cos_theta = float(direction @ residual / (a_norm * r_norm))
    cov = np.atleast_2d(np.cov(draws.draws, rowvar=False, ddof=1))
    replicate_variance = float(direction @ cov @ direction)
    return CellDiagnostics(
        a_norm=a_norm,
        cos_theta=cos_theta,
        replicate_variance=replicate_variance,
        cv_cri=coefficient_of_variation(cri_width, point),
        cv_cbi=(
            coefficient_of_variation(cbi_width, point)
            if cbi_width is not None
            else None
        ),
        orthogonality_flag=(
            cos_theta is not None and abs(cos_theta) < ORTHOGONALITY_COS_THRESHOLD
        ),
    )
