"""Finite-population sample model, calibration design vectors, and cells.

The calibration system stacks V variables over D geographic domains into a
single constraint vector of length p = V * D.  Block order is variable-major:
variable v occupies positions (v-1)*D+1 .. v*D (1-based), and a unit record
contributes its value for variable v at the position of its own domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

import numpy as np

from .errors import DataError


class TierLabel(Enum):
    """Inferential tier of a cross-tabulation cell.

    TIER_1E      exact constraint cell: calibration variable summed over one
                 whole domain.
    TIER_2CA     calibration variable summed under a filter derived from the
                 calibration variables themselves.
    TIER_2NCA    calibration variable summed under any other filter.
    TIER_3NCV    non-calibration outcome variable summed under any filter.
    """

    TIER_1E = "1-E"
    TIER_2CA = "2-CA"
    TIER_2NCA = "2-NCA"
    TIER_3NCV = "3-NCV"


@dataclass(frozen=True)
class StratumSpec:
    """Design stratum: population count and known design effect."""

    id: str
    population_size: int
    deff: float = 1.0

    def __post_init__(self):
        if self.population_size < 1:
            raise DataError(f"stratum {self.id!r}: population_size must be >= 1")
        if not self.deff > 0:
            raise DataError(f"stratum {self.id!r}: deff must be > 0")


@dataclass(frozen=True)
class DomainSpec:
    """Geographic domain with its 1-based block position."""

    id: str
    index: int


@dataclass(frozen=True)
class UnitRecord:
    """One sampled person.

    ``calib_values`` holds the raw measurements of the V calibration
    variables; ``attributes`` holds categorical levels used only for cell
    filtering; ``outcomes`` holds non-calibration numeric variables.
    """

    stratum: str
    domain: str
    design_weight: float
    calib_values: tuple[float, ...]
    attributes: Mapping[str, str] = field(default_factory=dict)
    outcomes: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.design_weight > 0:
            raise DataError(
                f"record in stratum {self.stratum!r}: design weight must be > 0"
            )


@dataclass(frozen=True)
class CalibrationSpec:
    """Names and layout of the V x D constraint system."""

    variable_names: tuple[str, ...]
    domain_order: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.variable_names)) != len(self.variable_names):
            raise DataError("calibration variable names must be unique")
        if len(set(self.domain_order)) != len(self.domain_order):
            raise DataError("domain order must list unique domains")
        if not self.variable_names or not self.domain_order:
            raise DataError("calibration system needs >= 1 variable and domain")

    @property
    def n_variables(self) -> int:
        return len(self.variable_names)

    @property
    def n_domains(self) -> int:
        return len(self.domain_order)

    @property
    def p(self) -> int:
        return self.n_variables * self.n_domains

    def domain_position(self, domain_id: str) -> int:
        """0-based position of a domain id in the block layout."""
        try:
            return self.domain_order.index(domain_id)
        except ValueError:
            raise DataError(f"unknown domain {domain_id!r}") from None

    def block_labels(self) -> tuple[str, ...]:
        """Column labels in block order: v1_d1, v1_d2, ..., vV_dD."""
        return tuple(
            f"v{v + 1}_d{d + 1}"
            for v in range(self.n_variables)
            for d in range(self.n_domains)
        )

    def describe_block(self, position: int) -> str:
        """Human-readable name of a 0-based block position."""
        v, d = divmod(position, self.n_domains)
        return f"({self.variable_names[v]}, {self.domain_order[d]})"


def block_index(v: int, d: int, spec: CalibrationSpec) -> int:
    """1-based block position of variable v in domain d, both 1-based.

    The layout is variable-major: position (v-1)*D + d.
    """
    if not 1 <= v <= spec.n_variables:
        raise DataError(f"variable index {v} outside 1..{spec.n_variables}")
    if not 1 <= d <= spec.n_domains:
        raise DataError(f"domain index {d} outside 1..{spec.n_domains}")
    return (v - 1) * spec.n_domains + d


def build_design_vector(record: UnitRecord, spec: CalibrationSpec) -> np.ndarray:
    """Stack a record's calibration values into its p-length design vector.

    Entry (v, d) carries the record's value for variable v when the record
    belongs to domain d, zero otherwise; at most V entries are non-zero.
    """
    if len(record.calib_values) != spec.n_variables:
        raise DataError(
            f"record has {len(record.calib_values)} calibration values, "
            f"spec declares {spec.n_variables}"
        )
    d = spec.domain_position(record.domain)
    y = np.zeros(spec.p)
    for v, value in enumerate(record.calib_values):
        y[v * spec.n_domains + d] = value
    return y


class SampleSet:
    """Immutable sample container with vectorized column views.

    Validates the frame invariants at construction (strata resolve, weights
    positive, domain indices form a bijection) and exposes numpy arrays for
    the numeric pipeline.  Instances are safe for concurrent read.
    """

    def __init__(
        self,
        records: Iterable[UnitRecord],
        strata: Iterable[StratumSpec],
        domains: Iterable[DomainSpec],
    ):
        self.records: tuple[UnitRecord, ...] = tuple(records)
        self.strata: tuple[StratumSpec, ...] = tuple(strata)
        self.domains: tuple[DomainSpec, ...] = tuple(
            sorted(domains, key=lambda d: d.index)
        )
        if not self.records:
            raise DataError("sample must contain at least one record")

        indices = [d.index for d in self.domains]
        if sorted(indices) != list(range(1, len(self.domains) + 1)):
            raise DataError("domain indices must be a bijection onto 1..D")
        ids = [d.id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise DataError("domain ids must be unique")
        stratum_ids = [s.id for s in self.strata]
        if len(set(stratum_ids)) != len(stratum_ids):
            raise DataError("stratum ids must be unique")

        self._stratum_pos = {s: i for i, s in enumerate(stratum_ids)}
        self._domain_pos = {d: i for i, d in enumerate(ids)}

        n_values = {len(r.calib_values) for r in self.records}
        if len(n_values) != 1:
            raise DataError("records disagree on the number of calibration values")
        self.n_calibration_values = n_values.pop()

        missing_strata = sorted(
            {r.stratum for r in self.records} - set(stratum_ids)
        )
        if missing_strata:
            raise DataError(f"records reference unknown strata: {missing_strata}")
        missing_domains = sorted({r.domain for r in self.records} - set(ids))
        if missing_domains:
            raise DataError(f"records reference unknown domains: {missing_domains}")

        self.n = len(self.records)
        self.weights = np.array([r.design_weight for r in self.records])
        self.calib = np.array([r.calib_values for r in self.records], dtype=float)
        self.stratum_idx = np.array(
            [self._stratum_pos[r.stratum] for r in self.records], dtype=np.intp
        )
        self.domain_idx = np.array(
            [self._domain_pos[r.domain] for r in self.records], dtype=np.intp
        )

        attr_keys = {frozenset(r.attributes) for r in self.records}
        if len(attr_keys) > 1:
            raise DataError("records carry inconsistent attribute keys")
        outcome_keys = {frozenset(r.outcomes) for r in self.records}
        if len(outcome_keys) > 1:
            raise DataError("records carry inconsistent outcome keys")
        self.attribute_names = tuple(sorted(attr_keys.pop())) if attr_keys else ()
        self.outcome_names = tuple(sorted(outcome_keys.pop())) if outcome_keys else ()
        self.attributes = {
            name: np.array([r.attributes[name] for r in self.records], dtype=object)
            for name in self.attribute_names
        }
        self.outcomes = {
            name: np.array([r.outcomes[name] for r in self.records], dtype=float)
            for name in self.outcome_names
        }

        self.stratum_counts = np.bincount(
            self.stratum_idx, minlength=len(self.strata)
        )
        self.stratum_sizes = np.array(
            [s.population_size for s in self.strata], dtype=float
        )
        self.stratum_deff = np.array([s.deff for s in self.strata])
        over = [
            s.id
            for s, n_h, cap in zip(
                self.strata, self.stratum_counts, self.stratum_sizes
            )
            if n_h > cap
        ]
        if over:
            raise DataError(f"sample count exceeds population size in strata: {over}")
        self.sampling_fractions = np.where(
            self.stratum_sizes > 0, self.stratum_counts / self.stratum_sizes, 0.0
        )
        self._design_matrix: np.ndarray | None = None

    @property
    def domain_ids(self) -> tuple[str, ...]:
        return tuple(d.id for d in self.domains)

    @property
    def stratum_ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.strata)

    def stratum_position(self, stratum_id: str) -> int:
        return self._stratum_pos[stratum_id]

    def check_spec(self, spec: CalibrationSpec) -> None:
        """Require the sample layout to match a calibration spec."""
        if self.domain_ids != spec.domain_order:
            raise DataError(
                f"sample domains {self.domain_ids} do not match the "
                f"calibration domain order {spec.domain_order}"
            )
        if self.n_calibration_values != spec.n_variables:
            raise DataError(
                f"records carry {self.n_calibration_values} calibration values, "
                f"spec declares {spec.n_variables}"
            )

    def design_matrix(self, spec: CalibrationSpec) -> np.ndarray:
        """n x p dense calibration design matrix (cached)."""
        self.check_spec(spec)
        if self._design_matrix is None:
            V, D = spec.n_variables, spec.n_domains
            Y = np.zeros((self.n, spec.p))
            rows = np.arange(self.n)
            for v in range(V):
                Y[rows, v * D + self.domain_idx] = self.calib[:, v]
            self._design_matrix = Y
        return self._design_matrix

    def stratum_members(self, position: int) -> np.ndarray:
        """Record indices belonging to the stratum at a 0-based position."""
        return np.nonzero(self.stratum_idx == position)[0]


def _as_frozenset(value) -> frozenset:
    if isinstance(value, (str, bytes)):
        return frozenset([value])
    return frozenset(value)


@dataclass(frozen=True)
class CellFilter:
    """Deterministic record predicate: the AND of all configured clauses.

    Clauses may restrict the record's domain, require categorical attributes
    to fall in given level sets, or require numeric calibration values to lie
    in closed intervals.  Membership never depends on weights or draws.
    """

    domains: frozenset[str] | None = None
    attribute_levels: tuple[tuple[str, frozenset[str]], ...] = ()
    value_ranges: tuple[tuple[str, tuple[float | None, float | None]], ...] = ()

    @staticmethod
    def build(
        domains=None,
        attributes: Mapping[str, object] | None = None,
        ranges: Mapping[str, tuple[float | None, float | None]] | None = None,
    ) -> "CellFilter":
        return CellFilter(
            domains=_as_frozenset(domains) if domains is not None else None,
            attribute_levels=tuple(
                sorted((k, _as_frozenset(v)) for k, v in (attributes or {}).items())
            ),
            value_ranges=tuple(sorted((ranges or {}).items())),
        )

    @property
    def is_always_true(self) -> bool:
        return (
            self.domains is None
            and not self.attribute_levels
            and not self.value_ranges
        )

    def single_domain(self) -> str | None:
        """The domain id when the filter is exactly one domain, else None."""
        if (
            self.domains is not None
            and len(self.domains) == 1
            and not self.attribute_levels
            and not self.value_ranges
        ):
            return next(iter(self.domains))
        return None


@dataclass(frozen=True)
class CellQuery:
    """A cross-tabulation cell: one summed variable and a fixed filter."""

    name: str
    summed_variable: str
    filter: CellFilter = CellFilter()
    tier_override: TierLabel | None = None
    link_variable: str | None = None


@dataclass(frozen=True)
class CellData:
    """Evaluated cell membership: boolean mask plus per-record summed values."""

    mask: np.ndarray
    values: np.ndarray

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def resolve_summed_values(
    query: CellQuery, sample: SampleSet, spec: CalibrationSpec
) -> tuple[np.ndarray, bool]:
    """Per-record values of the summed variable and whether it is calibrated."""
    name = query.summed_variable
    if name in spec.variable_names:
        return sample.calib[:, spec.variable_names.index(name)], True
    if name in sample.outcomes:
        return sample.outcomes[name], False
    raise DataError(
        f"cell {query.name!r}: variable {name!r} is neither a calibration "
        f"variable nor an outcome"
    )


def filter_mask(
    f: CellFilter,
    spec: CalibrationSpec,
    domain_idx: np.ndarray,
    attributes: Mapping[str, np.ndarray],
    calib: np.ndarray,
    cell_name: str = "?",
) -> np.ndarray:
    """Apply a cell filter to columnar unit data.

    Shared by sample evaluation and population truth computation so that the
    two paths cannot diverge.
    """
    n = domain_idx.shape[0]
    mask = np.ones(n, dtype=bool)
    if f.domains is not None:
        unknown = f.domains - set(spec.domain_order)
        if unknown:
            raise DataError(
                f"cell {cell_name!r}: filter references unknown domains "
                f"{sorted(unknown)}"
            )
        allowed = np.array(
            [d in f.domains for d in spec.domain_order], dtype=bool
        )
        mask &= allowed[domain_idx]
    for attr, levels in f.attribute_levels:
        if attr not in attributes:
            raise DataError(
                f"cell {cell_name!r}: filter references unknown attribute "
                f"{attr!r}"
            )
        mask &= np.isin(attributes[attr], list(levels))
    for var, (lo, hi) in f.value_ranges:
        if var not in spec.variable_names:
            raise DataError(
                f"cell {cell_name!r}: interval filter references "
                f"{var!r}, which is not a calibration variable"
            )
        column = calib[:, spec.variable_names.index(var)]
        if lo is not None:
            mask &= column >= lo
        if hi is not None:
            mask &= column <= hi
    return mask


def evaluate_cell(
    query: CellQuery, sample: SampleSet, spec: CalibrationSpec
) -> CellData:
    """Evaluate cell membership and summed values against a sample.

    The mask depends only on record attributes, domains, and calibration
    values; it is independent of weights, draws, and record order.
    """
    sample.check_spec(spec)
    values, _ = resolve_summed_values(query, sample, spec)
    mask = filter_mask(
        query.filter,
        spec,
        sample.domain_idx,
        sample.attributes,
        sample.calib,
        cell_name=query.name,
    )
    return CellData(mask=mask, values=values)
