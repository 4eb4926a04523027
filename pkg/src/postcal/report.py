"""Per-cell inference pipeline and report assembly.

One artifact bundle (Gram factorization, HT totals, posterior-mean weights)
is computed per run and shared read-only across cells; per-cell work is pure,
so cells are independent work units.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import calibration as cal
from . import replicate as rep
from . import variance as var
from .errors import LinkSelectionError, RankDeficiencyError
from .frame import CalibrationSpec, CellQuery, SampleSet, TierLabel, evaluate_cell
from .hb import PosteriorDraws
from .io import write_table

HUMAN_FLOAT = "%.6g"


@dataclass(frozen=True)
class InferenceArtifacts:
    """Shared read-only inputs for cell analysis."""

    sample: SampleSet
    spec: CalibrationSpec
    gram: cal.GramMatrix
    ht: np.ndarray
    draws: PosteriorDraws
    mean_weights: cal.CalibratedWeights
    calibration_attributes: tuple[str, ...] = ()
    level: float = 0.95

    @property
    def posterior_mean(self) -> np.ndarray:
        return self.draws.posterior_mean


def build_artifacts(
    sample: SampleSet,
    spec: CalibrationSpec,
    draws: PosteriorDraws,
    calibration_attributes: tuple[str, ...] = (),
    level: float = 0.95,
) -> InferenceArtifacts:
    """Factorize the calibration system and calibrate to the posterior mean."""
    gram = cal.compute_gram(sample, spec)
    if not gram.full_rank:
        raise RankDeficiencyError(
            f"calibration cross-product has rank {gram.rank} < {gram.p}; "
            f"deficient blocks: {list(gram.deficient_blocks)}",
            gram.deficient_blocks,
        )
    ht = cal.ht_totals(sample, spec)
    mean_weights = cal.calibrate(sample, gram, ht, draws.posterior_mean)
    return InferenceArtifacts(
        sample=sample,
        spec=spec,
        gram=gram,
        ht=ht,
        draws=draws,
        mean_weights=mean_weights,
        calibration_attributes=calibration_attributes,
        level=level,
    )


@dataclass
class CellReportRow:
    """One report row; interval columns are None where not applicable."""

    name: str
    tier: TierLabel
    n_cell: int
    point: float
    cri_lower: float
    cri_upper: float
    cri_kind: str
    cbi_lower: float | None = None
    cbi_upper: float | None = None
    component1: float | None = None
    component2: float | None = None
    a_norm: float = 0.0
    cos_theta: float | None = None
    orthogonality_flag: bool = False
    cv_cri: float | None = None
    cv_cbi: float | None = None
    link_variable: str | None = None
    link_rho: float | None = None
    warnings: tuple[str, ...] = ()

    @property
    def cri_width(self) -> float:
        return self.cri_upper - self.cri_lower

    @property
    def cbi_width(self) -> float | None:
        if self.cbi_lower is None:
            return None
        return self.cbi_upper - self.cbi_lower


@dataclass
class RunReport:
    rows: list[CellReportRow]
    metadata: dict


def analyze_cell(query: CellQuery, art: InferenceArtifacts) -> CellReportRow:
    """Run the full tier-appropriate inference for one cell."""
    sample, spec = art.sample, art.spec
    cell = evaluate_cell(query, sample, spec)
    tier = query.tier_override or rep.classify_cell(
        query, spec, sample, art.calibration_attributes
    )
    warnings: list[str] = []
    if query.tier_override is not None:
        auto = rep.classify_cell(query, spec, sample, art.calibration_attributes)
        if auto is not query.tier_override:
            warnings.append(
                f"tier override {query.tier_override.value} replaces "
                f"automatic classification {auto.value}"
            )
    if cell.count == 0:
        warnings.append("empty cell: no sampled records match the filter")

    totals = rep.replicate_totals(cell, art.draws, art.gram, art.ht, sample, spec)
    kind = "posterior" if tier is TierLabel.TIER_1E else "quasi-posterior"
    cri = rep.empirical_quantile_ci(totals.values, art.level, kind=kind)
    point = rep.point_estimate(cell, art.mean_weights)

    cbi_interval = None
    link_variable = None
    link_rho = None
    if tier is not TierLabel.TIER_1E:
        if tier is TierLabel.TIER_3NCV:
            try:
                link = _resolve_link(query, art, cell)
            except LinkSelectionError as exc:
                warnings.append(str(exc))
                link = None
            if link is not None:
                link_variable = link.variable
                link_rho = link.correlation
                if link.weak:
                    warnings.append(
                        f"weak ratio link |rho|={abs(link.correlation):.3f} < "
                        f"{var.WEAK_LINK_THRESHOLD}; design-based direct "
                        f"estimation is the recommended primary interval"
                    )
                denominator = link.variable
            else:
                denominator = None
        else:
            denominator = query.summed_variable
        if denominator is not None:
            components = var.variance_components(
                sample,
                spec,
                cell,
                art.mean_weights,
                denominator,
                art.posterior_mean,
                art.draws,
            )
            warnings.extend(components.warnings)
            cbi_interval = var.cbi(point, components)

    diag = var.cell_diagnostics(
        totals.direction,
        art.posterior_mean,
        art.ht,
        art.draws,
        cri.width,
        cbi_interval.width if cbi_interval is not None else None,
        point,
    )
    return CellReportRow(
        name=query.name,
        tier=tier,
        n_cell=cell.count,
        point=point,
        cri_lower=cri.lower,
        cri_upper=cri.upper,
        cri_kind=cri.kind,
        cbi_lower=cbi_interval.lower if cbi_interval else None,
        cbi_upper=cbi_interval.upper if cbi_interval else None,
        component1=cbi_interval.components.component1 if cbi_interval else None,
        component2=cbi_interval.components.component2 if cbi_interval else None,
        a_norm=diag.a_norm,
        cos_theta=diag.cos_theta,
        orthogonality_flag=diag.orthogonality_flag,
        cv_cri=_none_if_nan(diag.cv_cri),
        cv_cbi=_none_if_nan(diag.cv_cbi),
        link_variable=link_variable,
        link_rho=link_rho,
        warnings=tuple(warnings),
    )


def _resolve_link(query: CellQuery, art: InferenceArtifacts, cell):
    if query.link_variable is not None:
        if query.link_variable not in art.spec.variable_names:
            raise LinkSelectionError(
                f"cell {query.name!r}: linking variable "
                f"{query.link_variable!r} is not a calibration variable"
            )
        auto = var.select_linking_variable(art.sample, art.spec, cell)
        for candidate in auto.candidates:
            if candidate.name == query.link_variable:
                rho = candidate.correlation if candidate.correlation is not None else 0.0
                return var.RatioLink(
                    variable=query.link_variable,
                    correlation=rho,
                    candidates=auto.candidates,
                    weak=abs(rho) < var.WEAK_LINK_THRESHOLD,
                )
        raise LinkSelectionError(
            f"cell {query.name!r}: linking variable {query.link_variable!r} "
            f"not found among candidates"
        )
    return var.select_linking_variable(art.sample, art.spec, cell)


def _none_if_nan(value: float | None) -> float | None:
    if value is None or math.isnan(value):
        return None
    return value


def build_run_report(
    art: InferenceArtifacts,
    cells: tuple[CellQuery, ...],
    metadata: dict | None = None,
) -> RunReport:
    rows = [analyze_cell(query, art) for query in cells]
    meta = {
        "n_records": art.sample.n,
        "p": art.spec.p,
        "n_draws": art.draws.n_draws,
        "level": art.level,
        "gram_rank": art.gram.rank,
        "gram_condition": art.gram.condition_estimate,
        "negative_weight_count": art.mean_weights.negative_count,
    }
    meta.update(metadata or {})
    return RunReport(rows=rows, metadata=meta)


def _jsonable(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def report_to_dict(report: RunReport) -> dict:
    cells = []
    for row in report.rows:
        cells.append(
            {
                "name": row.name,
                "tier": row.tier.value,
                "n_cell": row.n_cell,
                "point": _jsonable(row.point),
                "cri_lower": _jsonable(row.cri_lower),
                "cri_upper": _jsonable(row.cri_upper),
                "cri_kind": row.cri_kind,
                "cbi_lower": _jsonable(row.cbi_lower),
                "cbi_upper": _jsonable(row.cbi_upper),
                "component1": _jsonable(row.component1),
                "component2": _jsonable(row.component2),
                "a_norm": _jsonable(row.a_norm),
                "cos_theta": _jsonable(row.cos_theta),
                "orthogonality_flag": row.orthogonality_flag,
                "cv_cri": _jsonable(row.cv_cri),
                "cv_cbi": _jsonable(row.cv_cbi),
                "link_variable": row.link_variable,
                "link_rho": _jsonable(row.link_rho),
                "warnings": list(row.warnings),
            }
        )
    return {
        "metadata": {k: _jsonable(v) for k, v in report.metadata.items()},
        "cells": cells,
    }


def write_report_json(path: str | Path, report: RunReport) -> None:
    with open(path, "w") as fh:
        json.dump(report_to_dict(report), fh, sort_keys=True, indent=2)
        fh.write("\n")


def _human(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float) and math.isnan(value):
        return ""
    return HUMAN_FLOAT % value


def write_report_tables(out_dir: str | Path, report: RunReport) -> tuple[Path, Path]:
    """Panel-style tables: estimates (intervals) and diagnostics."""
    out_dir = Path(out_dir)
    meta = {
        k: report.metadata[k]
        for k in ("seed", "config_hash")
        if k in report.metadata
    }
    estimates = out_dir / "report_estimates.csv"
    write_table(
        estimates,
        [
            "cell",
            "tier",
            "n_cell",
            "point",
            "cri_lower",
            "cri_upper",
            "cri_kind",
            "cbi_lower",
            "cbi_upper",
        ],
        [
            [
                row.name,
                row.tier.value,
                str(row.n_cell),
                _human(row.point),
                _human(row.cri_lower),
                _human(row.cri_upper),
                row.cri_kind,
                _human(row.cbi_lower),
                _human(row.cbi_upper),
            ]
            for row in report.rows
        ],
        metadata=meta,
    )
    diagnostics = out_dir / "report_diagnostics.csv"
    write_table(
        diagnostics,
        [
            "cell",
            "tier",
            "a_norm",
            "cos_theta",
            "orthogonal",
            "component1",
            "component2",
            "cv_cri",
            "cv_cbi",
            "link_variable",
            "link_rho",
            "warnings",
        ],
        [
            [
                row.name,
                row.tier.value,
                _human(row.a_norm),
                _human(row.cos_theta),
                _human(row.orthogonality_flag),
                _human(row.component1),
                _human(row.component2),
                _human(row.cv_cri),
                _human(row.cv_cbi),
                row.link_variable or "",
                _human(row.link_rho),
                "; ".join(row.warnings),
            ]
            for row in report.rows
        ],
        metadata=meta,
    )
    return estimates, diagnostics
