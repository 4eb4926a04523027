"""Delimited-file ingestion and interchange formats.

All machine-format files are comma separated with a header row; lines
starting with '#' carry run metadata (seed, config hash) and are skipped on
read.  Numeric values are written with 17 significant digits so that
re-reading reproduces the float64 values exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .frame import (
    CalibrationSpec,
    DomainSpec,
    SampleSet,
    StratumSpec,
    UnitRecord,
)
from .hb import PosteriorDraws

MACHINE_FLOAT = "%.17g"


def format_machine(value: float) -> str:
    return MACHINE_FLOAT % value


@dataclass(frozen=True)
class ColumnRoles:
    """Declares which columns of the record file play which role."""

    stratum: str
    domain: str
    weight: str
    calibration: tuple[str, ...]
    attributes: tuple[str, ...] = ()
    outcomes: tuple[str, ...] = ()
    record_id: str | None = None


@dataclass(frozen=True)
class BandRule:
    """Materializes a banded categorical attribute from a numeric variable."""

    name: str
    source: str
    bands: tuple[tuple[str, float | None, float | None], ...]
    else_label: str = "none"

    def label(self, value: float) -> str:
        for label, lo, hi in self.bands:
            if (lo is None or value >= lo) and (hi is None or value <= hi):
                return label
        return self.else_label


@dataclass
class IngestedSample:
    """Sample plus the metadata the pipeline needs alongside it."""

    sample: SampleSet
    spec: CalibrationSpec
    record_ids: tuple[str, ...]
    strata_covariates: dict[str, np.ndarray]
    calibration_attributes: tuple[str, ...] = field(default_factory=tuple)


def _read_rows(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        rows = [
            line for line in fh if line.strip() and not line.startswith("#")
        ]
    reader = csv.DictReader(rows)
    out = list(reader)
    if not out:
        raise DataError(f"{path}: no data rows")
    return out


def _parse_float(raw: str, where: str) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise DataError(f"{where}: cannot parse {raw!r} as a number") from None


def read_strata(path: str | Path) -> tuple[tuple[StratumSpec, ...], dict[str, np.ndarray]]:
    """Stratum metadata file: id, population_size, optional deff, covariates.

    Any additional numeric column is returned as a stratum-level covariate.
    """
    path = Path(path)
    rows = _read_rows(path)
    header = list(rows[0].keys())
    required = {"id", "population_size"}
    missing = required - set(header)
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")
    extra = [c for c in header if c not in ("id", "population_size", "deff")]
    strata = []
    covariates: dict[str, list[float]] = {c: [] for c in extra}
    for i, row in enumerate(rows):
        where = f"{path}:{i + 2}"
        deff = row.get("deff")
        strata.append(
            StratumSpec(
                id=row["id"],
                population_size=int(
                    _parse_float(row["population_size"], where)
                ),
                deff=_parse_float(deff, where) if deff not in (None, "") else 1.0,
            )
        )
        for c in extra:
            covariates[c].append(_parse_float(row[c], where))
    return tuple(strata), {c: np.array(v) for c, v in covariates.items()}


def read_sample(
    records_path: str | Path,
    strata_path: str | Path,
    roles: ColumnRoles,
    domain_order: tuple[str, ...] | None = None,
    band_rules: tuple[BandRule, ...] = (),
) -> IngestedSample:
    """Ingest unit records and stratum metadata into a validated sample.

    Band rules materialize derived categorical attributes (for example hours
    bands) at ingestion time, so cell membership stays fixed, and register
    them as calibration-derived when the source is a calibration variable.
    """
    records_path = Path(records_path)
    rows = _read_rows(records_path)
    header = set(rows[0].keys())
    needed = (
        {roles.stratum, roles.domain, roles.weight}
        | set(roles.calibration)
        | set(roles.attributes)
        | set(roles.outcomes)
    )
    if roles.record_id:
        needed.add(roles.record_id)
    missing = needed - header
    if missing:
        raise DataError(f"{records_path}: missing columns {sorted(missing)}")
    for rule in band_rules:
        if rule.source not in set(roles.calibration) | set(roles.outcomes):
            raise DataError(
                f"band rule {rule.name!r}: source {rule.source!r} is not a "
                f"declared numeric column"
            )

    strata, covariates = read_strata(strata_path)
    records = []
    record_ids = []
    seen_domains: list[str] = []
    for i, row in enumerate(rows):
        where = f"{records_path}:{i + 2}"
        calib = tuple(
            _parse_float(row[c], where) for c in roles.calibration
        )
        attributes = {a: row[a] for a in roles.attributes}
        numeric = dict(zip(roles.calibration, calib))
        outcomes = {}
        for o in roles.outcomes:
            outcomes[o] = _parse_float(row[o], where)
        numeric.update(outcomes)
        for rule in band_rules:
            attributes[rule.name] = rule.label(numeric[rule.source])
        domain = row[roles.domain]
        if domain not in seen_domains:
            seen_domains.append(domain)
        records.append(
            UnitRecord(
                stratum=row[roles.stratum],
                domain=domain,
                design_weight=_parse_float(row[roles.weight], where),
                calib_values=calib,
                attributes=attributes,
                outcomes=outcomes,
            )
        )
        record_ids.append(row[roles.record_id] if roles.record_id else str(i + 1))

    order = tuple(domain_order) if domain_order else tuple(sorted(seen_domains))
    unknown = set(seen_domains) - set(order)
    if unknown:
        raise DataError(
            f"{records_path}: records reference domains outside the declared "
            f"order: {sorted(unknown)}"
        )
    domains = tuple(DomainSpec(id=d, index=i + 1) for i, d in enumerate(order))
    spec = CalibrationSpec(
        variable_names=tuple(roles.calibration), domain_order=order
    )
    sample = SampleSet(records=records, strata=strata, domains=domains)
    calibration_attrs = tuple(
        rule.name for rule in band_rules if rule.source in roles.calibration
    )
    return IngestedSample(
        sample=sample,
        spec=spec,
        record_ids=tuple(record_ids),
        strata_covariates=covariates,
        calibration_attributes=calibration_attrs,
    )


def metadata_lines(metadata: dict) -> list[str]:
    return [f"# {key}={metadata[key]}" for key in sorted(metadata)]


def write_draws(
    path: str | Path,
    draws: PosteriorDraws,
    spec: CalibrationSpec,
    metadata: dict | None = None,
) -> None:
    """Write a draw matrix: one row per draw, chain tag plus p block columns."""
    path = Path(path)
    labels = spec.block_labels()
    if draws.p != len(labels):
        raise DataError(
            f"draw matrix width {draws.p} does not match layout p={len(labels)}"
        )
    with open(path, "w", newline="") as fh:
        for line in metadata_lines(metadata or {}):
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(("chain",) + labels)
        for tag, row in zip(draws.chain_tags, draws.draws):
            writer.writerow([str(int(tag))] + [format_machine(x) for x in row])


def read_draws(path: str | Path, spec: CalibrationSpec) -> PosteriorDraws:
    """Read a draw matrix and validate it against the calibration layout."""
    path = Path(path)
    rows = _read_rows(path)
    expected = ("chain",) + spec.block_labels()
    header = tuple(rows[0].keys())
    if header != expected:
        raise DataError(
            f"{path}: draw columns {header} do not match the expected layout "
            f"{expected}"
        )
    tags = []
    values = []
    for i, row in enumerate(rows):
        where = f"{path}:{i + 2}"
        tags.append(int(_parse_float(row["chain"], where)))
        values.append([_parse_float(row[c], where) for c in expected[1:]])
    return PosteriorDraws(draws=np.array(values), chain_tags=np.array(tags))


def write_weights(
    path: str | Path,
    record_ids,
    design_weights: np.ndarray,
    g_factors: np.ndarray,
    calibrated: np.ndarray,
    metadata: dict | None = None,
) -> None:
    """Posterior-mean calibrated weight export."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        for line in metadata_lines(metadata or {}):
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(["record_id", "design_weight", "g_factor", "calibrated_weight"])
        for rid, w, g, wc in zip(record_ids, design_weights, g_factors, calibrated):
            writer.writerow(
                [rid, format_machine(w), format_machine(g), format_machine(wc)]
            )


def write_table(
    path: str | Path,
    header: list[str],
    rows: list[list],
    metadata: dict | None = None,
) -> None:
    """Generic delimited table writer with metadata comment lines."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        for line in metadata_lines(metadata or {}):
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
