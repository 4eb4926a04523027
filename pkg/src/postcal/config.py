"""Structured run configuration: one YAML document, sections per subsystem."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .frame import CellFilter, CellQuery, TierLabel
from .hb import McmcConfig
from .io import BandRule, ColumnRoles

DEFAULT_LEVEL = 0.95
DEFAULT_RHAT_THRESHOLD = 1.2


@dataclass(frozen=True)
class ModelConfig:
    """Hierarchical model choice for one calibration variable."""

    variable: str
    kind: str  # "binary" or "gaussian"
    prior_df: float = 1.0
    prior_scale: float = 1.0
    covariates: tuple[str, ...] = ()
    fixed_sigma2: float | None = None


@dataclass
class RunConfig:
    """Validated configuration for one command invocation."""

    seed: int
    raw: dict
    records_path: Path | None = None
    strata_path: Path | None = None
    roles: ColumnRoles | None = None
    domain_order: tuple[str, ...] | None = None
    band_rules: tuple[BandRule, ...] = ()
    models: dict[str, ModelConfig] = field(default_factory=dict)
    mcmc: McmcConfig = McmcConfig()
    rhat_threshold: float = DEFAULT_RHAT_THRESHOLD
    cells: tuple[CellQuery, ...] = ()
    level: float = DEFAULT_LEVEL
    simulate: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw, self.seed)


def config_hash(raw: dict, seed: int) -> str:
    canonical = json.dumps(
        {"config": raw, "seed": seed}, sort_keys=True, separators=(",", ":")
    )
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return section[key]


def _as_tuple(value) -> tuple:
    if value is None:
        return ()
    if isinstance(value, (list, tuple)):
        return tuple(value)
    return (value,)


def parse_band_rules(entries, calibration: tuple[str, ...]) -> tuple[BandRule, ...]:
    rules = []
    for entry in entries or []:
        name = _require(entry, "name", "derived attribute")
        source = _require(entry, "source", f"derived attribute {name!r}")
        bands = []
        for band in _require(entry, "bands", f"derived attribute {name!r}"):
            bands.append(
                (
                    str(_require(band, "label", f"band of {name!r}")),
                    band.get("min"),
                    band.get("max"),
                )
            )
        rules.append(
            BandRule(
                name=name,
                source=source,
                bands=tuple(bands),
                else_label=str(entry.get("else_label", "none")),
            )
        )
    return tuple(rules)


def parse_cell(entry: dict, calibration: tuple[str, ...]) -> CellQuery:
    name = _require(entry, "name", "cell")
    summed = _require(entry, "sum", f"cell {name!r}")
    where = entry.get("where") or {}
    domains = None
    attributes = {}
    ranges = {}
    for key, value in where.items():
        if key == "domain":
            domains = _as_tuple(value)
        elif key in calibration:
            if not isinstance(value, dict) or not set(value) <= {"min", "max"}:
                raise ConfigError(
                    f"cell {name!r}: filter on calibration variable {key!r} "
                    f"must be an interval with 'min'/'max'"
                )
            ranges[key] = (value.get("min"), value.get("max"))
        else:
            attributes[key] = tuple(str(v) for v in _as_tuple(value))
    tier = entry.get("tier")
    try:
        tier_override = TierLabel(tier) if tier is not None else None
    except ValueError:
        raise ConfigError(
            f"cell {name!r}: unknown tier {tier!r}; expected one of "
            f"{[t.value for t in TierLabel]}"
        ) from None
    return CellQuery(
        name=name,
        summed_variable=summed,
        filter=CellFilter.build(domains=domains, attributes=attributes, ranges=ranges),
        tier_override=tier_override,
        link_variable=entry.get("link"),
    )


def load_config(path: str | Path, seed_override: int | None = None) -> RunConfig:
    """Load and validate a YAML configuration document."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return parse_config(raw, base_dir=path.parent, seed_override=seed_override)


def parse_config(
    raw: dict, base_dir: Path | None = None, seed_override: int | None = None
) -> RunConfig:
    base = base_dir or Path(".")
    seed = seed_override if seed_override is not None else int(raw.get("seed", 0))

    cfg = RunConfig(seed=seed, raw=raw)

    sample = raw.get("sample")
    calibration: tuple[str, ...] = ()
    if sample:
        columns = _require(sample, "columns", "sample")
        calibration = tuple(_require(columns, "calibration", "sample.columns"))
        cfg.roles = ColumnRoles(
            stratum=_require(columns, "stratum", "sample.columns"),
            domain=_require(columns, "domain", "sample.columns"),
            weight=_require(columns, "weight", "sample.columns"),
            calibration=calibration,
            attributes=tuple(_as_tuple(columns.get("attributes"))),
            outcomes=tuple(_as_tuple(columns.get("outcomes"))),
            record_id=columns.get("id"),
        )
        records = _require(sample, "records", "sample")
        strata = _require(sample, "strata", "sample")
        cfg.records_path = (base / records).resolve()
        cfg.strata_path = (base / strata).resolve()
        for p in (cfg.records_path, cfg.strata_path):
            if not p.exists():
                raise ConfigError(f"input file not found: {p}")
        order = sample.get("domain_order")
        cfg.domain_order = tuple(order) if order else None
        cfg.band_rules = parse_band_rules(sample.get("derived"), calibration)

    models = raw.get("models") or {}
    for variable, spec in models.items():
        kind = _require(spec, "kind", f"models.{variable}")
        if kind not in ("binary", "gaussian"):
            raise ConfigError(
                f"models.{variable}: kind must be 'binary' or 'gaussian'"
            )
        cfg.models[variable] = ModelConfig(
            variable=variable,
            kind=kind,
            prior_df=float(spec.get("prior_df", 1.0)),
            prior_scale=float(spec.get("prior_scale", 1.0)),
            covariates=tuple(_as_tuple(spec.get("covariates"))),
            fixed_sigma2=(
                float(spec["fixed_sigma2"])
                if spec.get("fixed_sigma2") is not None
                else None
            ),
        )

    mcmc = raw.get("mcmc") or {}
    cfg.mcmc = McmcConfig(
        burnin=int(mcmc.get("burnin", 1000)),
        iterations=int(mcmc.get("iterations", 5000)),
        chains=int(mcmc.get("chains", 3)),
        seed=seed,
        proposal_sd=float(mcmc.get("proposal_sd", 0.5)),
    )
    cfg.rhat_threshold = float(mcmc.get("rhat_threshold", DEFAULT_RHAT_THRESHOLD))

    cells = raw.get("cells") or []
    parsed = tuple(parse_cell(entry, calibration) for entry in cells)
    names = [c.name for c in parsed]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ConfigError(f"duplicate cell names: {dupes}")
    cfg.cells = parsed

    report = raw.get("report") or {}
    cfg.level = float(report.get("level", DEFAULT_LEVEL))
    if not 0.0 < cfg.level < 1.0:
        raise ConfigError("report.level must be in (0, 1)")

    cfg.simulate = raw.get("simulate") or {}
    if cfg.simulate.get("derived"):
        # simulation-only configs carry band rules without a sample section
        cfg.band_rules = cfg.band_rules + parse_band_rules(
            cfg.simulate["derived"], calibration
        )
    return cfg
