"""Synthetic populations and repeated-sampling coverage experiments.

The harness realizes a finite population with known cell truths, draws fresh
stratified samples, pushes each one through the full inference pipeline, and
accumulates coverage of both interval kinds against the truths.  Seeds are
split hierarchically (master seed, replication, stage, chain), so runs are
reproducible under parallel execution and replication order.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, DataError
from .fitting import fit_all_variables
from .frame import (
    CalibrationSpec,
    CellQuery,
    DomainSpec,
    SampleSet,
    StratumSpec,
    UnitRecord,
    filter_mask,
)
from .hb import McmcConfig, PosteriorDraws, chain_rng, gelman_rubin
from .report import CellReportRow, build_artifacts, build_run_report


@dataclass(frozen=True)
class StratumPlan:
    """One population stratum: size, domain membership, model covariate."""

    id: str
    domain: str
    population_size: int
    covariate: float = 0.0
    deff: float = 1.0


@dataclass(frozen=True)
class BinaryVariableModel:
    """Stratum-level logit model for a binary calibration variable.

    ``exclusive_with`` forces the variable to 0 wherever an earlier binary
    variable is 1 (for example unemployment within employment).
    """

    name: str
    intercept: float
    slope: float = 0.0
    stratum_sd: float = 0.0
    exclusive_with: str | None = None


@dataclass(frozen=True)
class ContinuousVariableModel:
    """Gaussian unit-level model with optional stratum effects and gating."""

    name: str
    mean: float
    unit_sd: float
    slope: float = 0.0
    stratum_sd: float = 0.0
    clip: tuple[float | None, float | None] = (None, None)
    gated_by: str | None = None


@dataclass(frozen=True)
class AttributeModel:
    """Categorical attribute with optionally domain-tilted level shares."""

    name: str
    levels: tuple[tuple[str, float], ...]
    domain_tilt: float = 0.0

    def __post_init__(self):
        probs = [p for _, p in self.levels]
        if any(p < 0 or p > 1 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigError(
                f"attribute {self.name!r}: level probabilities must lie in "
                f"[0, 1] and sum to 1"
            )

    def domain_probs(self, domain_position: int) -> np.ndarray:
        probs = np.array([p for _, p in self.levels])
        if self.domain_tilt:
            k = np.arange(len(probs))
            tilt = np.where((k + domain_position) % 2 == 0, 1.0, -1.0)
            probs = probs * (1.0 + self.domain_tilt * tilt)
            probs = probs / probs.sum()
        return probs


@dataclass(frozen=True)
class OutcomeModel:
    """Outcome with a controllable population correlation to a variable."""

    name: str
    link: str
    rho: float
    loc: float = 0.0
    scale: float = 1.0


@dataclass(frozen=True)
class SyntheticPopulationSpec:
    domains: tuple[str, ...]
    strata: tuple[StratumPlan, ...]
    variables: tuple[BinaryVariableModel | ContinuousVariableModel, ...]
    attributes: tuple[AttributeModel, ...] = ()
    outcomes: tuple[OutcomeModel, ...] = ()
    seed: int = 0


@dataclass
class SurveyFrame:
    """Fully realized finite population with columnar views."""

    spec: SyntheticPopulationSpec
    calibration: CalibrationSpec
    strata: tuple[StratumSpec, ...]
    domains: tuple[DomainSpec, ...]
    stratum_idx: np.ndarray
    domain_idx: np.ndarray
    calib: np.ndarray
    attributes: dict[str, np.ndarray]
    outcomes: dict[str, np.ndarray]
    covariates: dict[str, np.ndarray]

    @property
    def size(self) -> int:
        return self.stratum_idx.shape[0]

    def cell_truth(self, query: CellQuery) -> float:
        """Exhaustive population total of the cell's summed variable."""
        if query.summed_variable in self.calibration.variable_names:
            values = self.calib[
                :, self.calibration.variable_names.index(query.summed_variable)
            ]
        elif query.summed_variable in self.outcomes:
            values = self.outcomes[query.summed_variable]
        else:
            raise DataError(
                f"cell {query.name!r}: unknown variable "
                f"{query.summed_variable!r}"
            )
        mask = filter_mask(
            query.filter,
            self.calibration,
            self.domain_idx,
            self.attributes,
            self.calib,
            cell_name=query.name,
        )
        return float(values[mask].sum())

    def truth_table(self, cells) -> dict[str, float]:
        return {query.name: self.cell_truth(query) for query in cells}

    def calibration_truth_vector(self) -> np.ndarray:
        """Population domain totals of the calibration variables."""
        spec = self.calibration
        out = np.zeros(spec.p)
        for v in range(spec.n_variables):
            for d in range(spec.n_domains):
                members = self.domain_idx == d
                out[v * spec.n_domains + d] = self.calib[members, v].sum()
        return out


def generate_population(spec: SyntheticPopulationSpec) -> SurveyFrame:
    """Realize every population unit; deterministic under the spec seed."""
    if len({s.id for s in spec.strata}) != len(spec.strata):
        raise ConfigError("stratum ids must be unique")
    unknown = sorted({s.domain for s in spec.strata} - set(spec.domains))
    if unknown:
        raise ConfigError(f"strata reference unknown domains {unknown}")
    names = [v.name for v in spec.variables]
    if len(set(names)) != len(names):
        raise ConfigError("variable names must be unique")
    for v in spec.variables:
        if isinstance(v, BinaryVariableModel) and v.exclusive_with is not None:
            before = names[: names.index(v.name)]
            if v.exclusive_with not in before:
                raise ConfigError(
                    f"variable {v.name!r}: exclusive_with must reference an "
                    f"earlier binary variable"
                )
        if isinstance(v, ContinuousVariableModel) and v.gated_by is not None:
            if v.gated_by not in names[: names.index(v.name)]:
                raise ConfigError(
                    f"variable {v.name!r}: gated_by must reference an earlier "
                    f"variable"
                )
    for o in spec.outcomes:
        if not -1.0 <= o.rho <= 1.0:
            raise ConfigError(
                f"outcome {o.name!r}: target correlation {o.rho} outside [-1, 1]"
            )
        if o.link not in names:
            raise ConfigError(
                f"outcome {o.name!r}: link {o.link!r} is not a generated variable"
            )

    rng = chain_rng(spec.seed, 0)
    H = len(spec.strata)
    sizes = np.array([s.population_size for s in spec.strata])
    z = np.array([s.covariate for s in spec.strata])
    N = int(sizes.sum())
    domain_pos = {d: i for i, d in enumerate(spec.domains)}
    stratum_idx = np.repeat(np.arange(H), sizes)
    domain_idx = np.repeat(
        np.array([domain_pos[s.domain] for s in spec.strata]), sizes
    )

    calib = np.zeros((N, len(spec.variables)))
    for v_pos, model in enumerate(spec.variables):
        effects = rng.normal(0.0, model.stratum_sd, H) if model.stratum_sd else np.zeros(H)
        if isinstance(model, BinaryVariableModel):
            eta = model.intercept + model.slope * z + effects
            p = 1.0 / (1.0 + np.exp(-eta))
            column = (rng.random(N) < p[stratum_idx]).astype(float)
            if model.exclusive_with is not None:
                other = calib[:, names.index(model.exclusive_with)]
                column = column * (1.0 - other)
        else:
            mu = model.mean + model.slope * z + effects
            column = mu[stratum_idx] + rng.normal(0.0, model.unit_sd, N)
            lo, hi = model.clip
            if lo is not None or hi is not None:
                column = np.clip(column, lo, hi)
            if model.gated_by is not None:
                column = column * calib[:, names.index(model.gated_by)]
        calib[:, v_pos] = column

    attributes: dict[str, np.ndarray] = {}
    for attr in spec.attributes:
        labels = np.array([label for label, _ in attr.levels], dtype=object)
        column = np.empty(N, dtype=object)
        for d in range(len(spec.domains)):
            members = np.nonzero(domain_idx == d)[0]
            if members.size == 0:
                continue
            picks = rng.choice(len(labels), size=members.size, p=attr.domain_probs(d))
            column[members] = labels[picks]
        attributes[attr.name] = column

    outcomes: dict[str, np.ndarray] = {}
    for model in spec.outcomes:
        base = calib[:, names.index(model.link)]
        sd = float(base.std())
        if sd == 0.0 and model.rho != 0.0:
            raise ConfigError(
                f"outcome {model.name!r}: target correlation {model.rho} is "
                f"unreachable because {model.link!r} is constant in the "
                f"population"
            )
        standardized = (base - base.mean()) / sd if sd > 0 else np.zeros(N)
        noise = rng.standard_normal(N)
        mix = model.rho * standardized + math.sqrt(1.0 - model.rho**2) * noise
        outcomes[model.name] = model.loc + model.scale * mix

    calibration = CalibrationSpec(
        variable_names=tuple(names), domain_order=tuple(spec.domains)
    )
    return SurveyFrame(
        spec=spec,
        calibration=calibration,
        strata=tuple(
            StratumSpec(id=s.id, population_size=s.population_size, deff=s.deff)
            for s in spec.strata
        ),
        domains=tuple(
            DomainSpec(id=d, index=i + 1) for i, d in enumerate(spec.domains)
        ),
        stratum_idx=stratum_idx,
        domain_idx=domain_idx,
        calib=calib,
        attributes=attributes,
        outcomes=outcomes,
        covariates={"z": z},
    )


def draw_stratified_sample(
    frame: SurveyFrame, fraction: float, rng: np.random.Generator
) -> SampleSet:
    """Stratified simple random sample without replacement.

    Takes round(fraction * N_h) units per stratum with a floor of 2, and
    attaches the design weights N_h / n_h.
    """
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"sampling fraction must be in (0, 1], got {fraction}")
    records = []
    attr_names = sorted(frame.attributes)
    outcome_names = sorted(frame.outcomes)
    for pos, stratum in enumerate(frame.strata):
        members = np.nonzero(frame.stratum_idx == pos)[0]
        N_h = members.size
        if N_h < 2:
            raise DataError(
                f"stratum {stratum.id!r} has population {N_h} < 2"
            )
        n_h = min(N_h, max(2, round(fraction * N_h)))
        chosen = np.sort(rng.choice(members, size=n_h, replace=False))
        weight = N_h / n_h
        for i in chosen:
            i = int(i)
            records.append(
                UnitRecord(
                    stratum=stratum.id,
                    domain=frame.spec.domains[int(frame.domain_idx[i])],
                    design_weight=weight,
                    calib_values=tuple(frame.calib[i]),
                    attributes={a: frame.attributes[a][i] for a in attr_names},
                    outcomes={o: frame.outcomes[o][i] for o in outcome_names},
                )
            )
    return SampleSet(records=records, strata=frame.strata, domains=frame.domains)


@dataclass(frozen=True)
class McConfig:
    """Repeated-sampling experiment settings."""

    replications: int
    sampling_fraction: float
    mcmc: McmcConfig
    cells: tuple[CellQuery, ...]
    seed: int
    models: dict[str, ModelConfig] = field(default_factory=dict)
    calibration_attributes: tuple[str, ...] = ()
    level: float = 0.95
    rhat_threshold: float = 1.2
    target_mode: str = "hb"  # "hb" or "truth" (bypass fitting, pin to truth)

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.target_mode not in ("hb", "truth"):
            raise ConfigError("target_mode must be 'hb' or 'truth'")


@dataclass
class ReplicationResult:
    index: int
    converged: bool
    rhat_max: float | None
    rows: list[CellReportRow] = field(default_factory=list)
    warnings: tuple[str, ...] = ()


def run_replication(
    frame: SurveyFrame, config: McConfig, index: int
) -> ReplicationResult:
    """One full pipeline pass: sample, fit, calibrate, infer.

    Replication ``index`` owns the generator streams addressed by
    (seed, index, ...); a non-converged fit is flagged and carries no rows.
    """
    rng = chain_rng(config.seed, index, 0)
    sample = draw_stratified_sample(frame, config.sampling_fraction, rng)
    spec = frame.calibration

    if config.target_mode == "truth":
        truth_vector = frame.calibration_truth_vector()
        draws = PosteriorDraws(
            draws=np.tile(truth_vector, (2, 1)), chain_tags=np.array([0, 1])
        )
        rhat_max = 1.0
        warnings: tuple[str, ...] = ()
    else:
        mcmc = McmcConfig(
            burnin=config.mcmc.burnin,
            iterations=config.mcmc.iterations,
            chains=config.mcmc.chains,
            seed=config.seed,
            proposal_sd=config.mcmc.proposal_sd,
        )
        draws, _, warnings = fit_all_variables(
            sample,
            spec,
            config.models,
            frame.covariates,
            mcmc,
            base_key=(index, 1),
        )
        convergence = gelman_rubin(draws)
        rhat_max = convergence.rhat_max
        if convergence.available and convergence.rhat_max > config.rhat_threshold:
            return ReplicationResult(
                index=index,
                converged=False,
                rhat_max=convergence.rhat_max,
                warnings=warnings,
            )

    art = build_artifacts(
        sample,
        spec,
        draws,
        calibration_attributes=config.calibration_attributes,
        level=config.level,
    )
    report = build_run_report(art, config.cells)
    return ReplicationResult(
        index=index,
        converged=True,
        rhat_max=rhat_max,
        rows=report.rows,
        warnings=warnings,
    )


@dataclass
class CellCoverage:
    """Accumulated repeated-sampling performance of one cell."""

    name: str
    tier: str
    truth: float
    replications: int
    mean_point: float
    mean_are: float | None
    mean_n_cell: float
    cri_coverage: float
    cri_mc_se: float
    cri_significant: bool
    cbi_coverage: float | None
    cbi_mc_se: float | None
    cbi_significant: bool | None
    mean_cv_cri: float | None
    mean_cv_cbi: float | None


@dataclass
class CoverageReport:
    cells: list[CellCoverage]
    replications_requested: int
    replications_used: int
    excluded_nonconverged: int
    nominal: float


def _mean_or_none(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def _covered(lower: float, upper: float, truth: float) -> bool:
    # membership with a rounding guard so that intervals that are exactly
    # degenerate at the truth (up to summation order) count as covering it
    tol = 1e-12 * max(abs(lower), abs(upper), abs(truth), 1.0)
    return lower - tol <= truth <= upper + tol


def accumulate_report(
    results: list[ReplicationResult],
    truths: dict[str, float],
    config: McConfig,
) -> CoverageReport:
    """Reduce replication outputs to per-cell coverage statistics.

    Results are reduced in replication order regardless of arrival order, so
    the report is independent of scheduling.  Coverage differences from the
    nominal level beyond two Monte Carlo standard errors are annotated as
    significant.
    """
    ordered = sorted(results, key=lambda r: r.index)
    used = [r for r in ordered if r.converged]
    if not used:
        raise DataError("no converged replications to accumulate")
    nominal = config.level

    cells: list[CellCoverage] = []
    for pos, query in enumerate(config.cells):
        truth = truths[query.name]
        points: list[float] = []
        ares: list[float] = []
        n_cells: list[float] = []
        cri_hits: list[bool] = []
        cbi_hits: list[bool] = []
        cv_cri: list[float] = []
        cv_cbi: list[float] = []
        tier = None
        for r in used:
            row = r.rows[pos]
            tier = row.tier
            points.append(row.point)
            n_cells.append(row.n_cell)
            if truth != 0.0:
                ares.append(abs(row.point - truth) / abs(truth))
            cri_hits.append(_covered(row.cri_lower, row.cri_upper, truth))
            if row.cbi_lower is not None:
                cbi_hits.append(_covered(row.cbi_lower, row.cbi_upper, truth))
            if row.cv_cri is not None:
                cv_cri.append(row.cv_cri)
            if row.cv_cbi is not None:
                cv_cbi.append(row.cv_cbi)
        R = len(used)
        cri_rate = float(np.mean(cri_hits))
        cri_se = math.sqrt(cri_rate * (1.0 - cri_rate) / R)
        if cbi_hits:
            cbi_rate = float(np.mean(cbi_hits))
            cbi_se = math.sqrt(cbi_rate * (1.0 - cbi_rate) / len(cbi_hits))
            cbi_sig = abs(cbi_rate - nominal) > 2.0 * cbi_se
        else:
            cbi_rate = cbi_se = cbi_sig = None
        cells.append(
            CellCoverage(
                name=query.name,
                tier=tier.value if tier is not None else "",
                truth=truth,
                replications=R,
                mean_point=float(np.mean(points)),
                mean_are=_mean_or_none(ares),
                mean_n_cell=float(np.mean(n_cells)),
                cri_coverage=cri_rate,
                cri_mc_se=cri_se,
                cri_significant=abs(cri_rate - nominal) > 2.0 * cri_se,
                cbi_coverage=cbi_rate,
                cbi_mc_se=cbi_se,
                cbi_significant=cbi_sig,
                mean_cv_cri=_mean_or_none(cv_cri),
                mean_cv_cbi=_mean_or_none(cv_cbi),
            )
        )
    return CoverageReport(
        cells=cells,
        replications_requested=config.replications,
        replications_used=len(used),
        excluded_nonconverged=len(ordered) - len(used),
        nominal=nominal,
    )


def apply_band_rules(frame: SurveyFrame, rules) -> None:
    """Materialize banded attributes on the population frame.

    Bands are derived deterministically from generated numeric columns, so
    sample records and population truths see identical attribute values.
    """
    for rule in rules:
        if rule.source in frame.calibration.variable_names:
            column = frame.calib[
                :, frame.calibration.variable_names.index(rule.source)
            ]
        elif rule.source in frame.outcomes:
            column = frame.outcomes[rule.source]
        else:
            raise ConfigError(
                f"band rule {rule.name!r}: unknown source {rule.source!r}"
            )
        frame.attributes[rule.name] = np.array(
            [rule.label(float(x)) for x in column], dtype=object
        )


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return section[key]


def population_spec_from_config(section: dict, seed: int) -> SyntheticPopulationSpec:
    """Build a population spec from the ``simulate.population`` section."""
    domains = tuple(_require(section, "domains", "simulate.population"))
    strata_cfg = _require(section, "strata", "simulate.population")
    plans: list[StratumPlan] = []
    if isinstance(strata_cfg, list):
        for entry in strata_cfg:
            plans.append(
                StratumPlan(
                    id=str(_require(entry, "id", "stratum")),
                    domain=str(_require(entry, "domain", "stratum")),
                    population_size=int(
                        _require(entry, "population_size", "stratum")
                    ),
                    covariate=float(entry.get("covariate", 0.0)),
                    deff=float(entry.get("deff", 1.0)),
                )
            )
    else:
        per_domain = int(_require(strata_cfg, "per_domain", "simulate.population.strata"))
        size = int(_require(strata_cfg, "population_size", "simulate.population.strata"))
        lo, hi = strata_cfg.get("covariate_range", (-1.0, 1.0))
        deff = float(strata_cfg.get("deff", 1.0))
        total = per_domain * len(domains)
        covariates = np.linspace(float(lo), float(hi), total)
        width = len(str(total))
        k = 0
        for domain in domains:
            for _ in range(per_domain):
                plans.append(
                    StratumPlan(
                        id=f"s{k + 1:0{width}d}",
                        domain=domain,
                        population_size=size,
                        covariate=float(covariates[k]),
                        deff=deff,
                    )
                )
                k += 1

    variables: list[BinaryVariableModel | ContinuousVariableModel] = []
    for entry in _require(section, "variables", "simulate.population"):
        name = str(_require(entry, "name", "variable"))
        kind = _require(entry, "kind", f"variable {name!r}")
        if kind == "binary":
            variables.append(
                BinaryVariableModel(
                    name=name,
                    intercept=float(_require(entry, "intercept", name)),
                    slope=float(entry.get("slope", 0.0)),
                    stratum_sd=float(entry.get("stratum_sd", 0.0)),
                    exclusive_with=entry.get("exclusive_with"),
                )
            )
        elif kind == "continuous":
            clip = entry.get("clip") or (None, None)
            variables.append(
                ContinuousVariableModel(
                    name=name,
                    mean=float(_require(entry, "mean", name)),
                    unit_sd=float(_require(entry, "unit_sd", name)),
                    slope=float(entry.get("slope", 0.0)),
                    stratum_sd=float(entry.get("stratum_sd", 0.0)),
                    clip=(
                        float(clip[0]) if clip[0] is not None else None,
                        float(clip[1]) if clip[1] is not None else None,
                    ),
                    gated_by=entry.get("gated_by"),
                )
            )
        else:
            raise ConfigError(
                f"variable {name!r}: kind must be 'binary' or 'continuous'"
            )

    attributes = tuple(
        AttributeModel(
            name=str(_require(entry, "name", "attribute")),
            levels=tuple(
                (str(label), float(prob))
                for label, prob in _require(entry, "levels", "attribute").items()
            ),
            domain_tilt=float(entry.get("domain_tilt", 0.0)),
        )
        for entry in section.get("attributes") or ()
    )
    outcomes = tuple(
        OutcomeModel(
            name=str(_require(entry, "name", "outcome")),
            link=str(_require(entry, "link", "outcome")),
            rho=float(_require(entry, "rho", "outcome")),
            loc=float(entry.get("loc", 0.0)),
            scale=float(entry.get("scale", 1.0)),
        )
        for entry in section.get("outcomes") or ()
    )
    return SyntheticPopulationSpec(
        domains=domains,
        strata=tuple(plans),
        variables=tuple(variables),
        attributes=attributes,
        outcomes=outcomes,
        seed=seed,
    )


def build_simulation(cfg) -> tuple[SurveyFrame, McConfig, dict[str, float]]:
    """Realize the configured experiment: population, settings, truths.

    ``cfg`` is a parsed run configuration with a ``simulate`` section; band
    rules are materialized on the frame so truths and samples agree.
    """
    section = cfg.simulate
    if not section:
        raise ConfigError("config lacks a 'simulate' section")
    if not cfg.cells:
        raise ConfigError("config declares no cells to simulate")
    population = population_spec_from_config(
        section.get("population") or {}, seed=cfg.seed
    )
    frame = generate_population(population)
    apply_band_rules(frame, cfg.band_rules)
    calibration_attrs = tuple(
        rule.name
        for rule in cfg.band_rules
        if rule.source in frame.calibration.variable_names
    )
    mc_section = section.get("mc") or {}
    mc = McConfig(
        replications=int(mc_section.get("replications", 200)),
        sampling_fraction=float(mc_section.get("sampling_fraction", 0.05)),
        mcmc=cfg.mcmc,
        cells=cfg.cells,
        seed=cfg.seed,
        models=cfg.models,
        calibration_attributes=calibration_attrs,
        level=cfg.level,
        rhat_threshold=cfg.rhat_threshold,
        target_mode=str(mc_section.get("target_mode", "hb")),
    )
    return frame, mc, frame.truth_table(mc.cells)


def _replication_job(args) -> ReplicationResult:
    frame, config, index = args
    return run_replication(frame, config, index)


def run_simulation(
    frame: SurveyFrame,
    config: McConfig,
    truths: dict[str, float] | None = None,
    threads: int = 1,
) -> tuple[CoverageReport, list[ReplicationResult]]:
    """Run all replications (optionally in parallel) and accumulate."""
    truths = truths if truths is not None else frame.truth_table(config.cells)
    indexes = range(config.replications)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(
                    _replication_job,
                    [(frame, config, i) for i in indexes],
                    chunksize=max(1, config.replications // (4 * threads)),
                )
            )
    else:
        results = [run_replication(frame, config, i) for i in indexes]
    return accumulate_report(results, truths, config), results
