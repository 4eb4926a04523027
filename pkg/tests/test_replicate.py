import numpy as np
import pytest

from postcal.calibration import calibrate, compute_gram, ht_totals
from postcal.errors import DataError, NumericalError
from postcal.frame import (
    CalibrationSpec,
    CellFilter,
    CellQuery,
    DomainSpec,
    SampleSet,
    StratumSpec,
    TierLabel,
    UnitRecord,
    evaluate_cell,
)
from postcal.hb import PosteriorDraws
from postcal.replicate import (
    classify_cell,
    empirical_quantile_ci,
    point_estimate,
    recalibration_oracle,
    replicate_totals,
)

from conftest import make_random_sample


def survey_sample():
    """Sample with binary employment, hours, an occupation attribute, and
    an income outcome; 3 domains."""
    rng = np.random.default_rng(31)
    domains = tuple(DomainSpec(f"d{j + 1}", j + 1) for j in range(3))
    strata = (StratumSpec("s1", 400), StratumSpec("s2", 400))
    records = []
    for i in range(48):
        employed = float(rng.random() < 0.65)
        hours = employed * rng.uniform(4.0, 55.0)
        records.append(
            UnitRecord(
                stratum="s1" if i % 2 == 0 else "s2",
                domain=domains[i % 3].id,
                design_weight=rng.uniform(2.0, 6.0),
                attributes={
                    "occupation": rng.choice(["managers", "trades", "sales"]),
                    "hours_band": "35-39" if 35 <= hours <= 39 else "other",
                },
                outcomes={"income": hours * 25.0 + rng.normal(0.0, 40.0)},
                calib_values=(employed, hours),
            )
        )
    spec = CalibrationSpec(("employed", "hours"), tuple(d.id for d in domains))
    return SampleSet(records, strata, domains), spec


def synthetic_draws(ht, n_draws, seed, scale=0.05):
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, scale, size=(n_draws, ht.shape[0]))
    return PosteriorDraws(
        draws=ht[None, :] * (1.0 + noise),
        chain_tags=np.zeros(n_draws, dtype=int),
    )


class TestClassification:
    def test_domain_total_of_calibration_variable(self):
        sample, spec = survey_sample()
        q = CellQuery("hours_d1", "hours", CellFilter.build(domains="d1"))
        assert classify_cell(q, spec, sample) is TierLabel.TIER_1E

    def test_interval_filter_is_calibration_derived(self):
        sample, spec = survey_sample()
        q = CellQuery(
            "emp_band", "employed", CellFilter.build(ranges={"hours": (35, 39)})
        )
        assert classify_cell(q, spec, sample) is TierLabel.TIER_2CA

    def test_declared_derived_attribute(self):
        sample, spec = survey_sample()
        q = CellQuery(
            "emp_band", "employed", CellFilter.build(attributes={"hours_band": "35-39"})
        )
        assert (
            classify_cell(q, spec, sample, calibration_attributes=("hours_band",))
            is TierLabel.TIER_2CA
        )
        assert classify_cell(q, spec, sample) is TierLabel.TIER_2NCA

    def test_non_calibration_attribute(self):
        sample, spec = survey_sample()
        q = CellQuery(
            "emp_occ", "employed", CellFilter.build(attributes={"occupation": "trades"})
        )
        assert classify_cell(q, spec, sample) is TierLabel.TIER_2NCA

    def test_outcome_variable(self):
        sample, spec = survey_sample()
        q = CellQuery(
            "income_occ", "income", CellFilter.build(attributes={"occupation": "sales"})
        )
        assert classify_cell(q, spec, sample) is TierLabel.TIER_3NCV

    def test_multi_domain_filter_is_not_exact(self):
        sample, spec = survey_sample()
        q = CellQuery(
            "hours_d12", "hours", CellFilter.build(domains=("d1", "d2"))
        )
        assert classify_cell(q, spec, sample) is TierLabel.TIER_2CA

    def test_mixed_filter_falls_to_nca(self):
        sample, spec = survey_sample()
        q = CellQuery(
            "mixed",
            "employed",
            CellFilter.build(
                attributes={"occupation": "trades"}, ranges={"hours": (10, 20)}
            ),
        )
        assert classify_cell(q, spec, sample) is TierLabel.TIER_2NCA


class TestReplicateTotals:
    def test_exact_constraint_cell_reproduces_draw_column(self):
        sample, spec = survey_sample()
        gram = compute_gram(sample, spec)
        ht = ht_totals(sample, spec)
        draws = synthetic_draws(ht, 50, seed=1)
        q = CellQuery("hours_d2", "hours", CellFilter.build(domains="d2"))
        cell = evaluate_cell(q, sample, spec)
        totals = replicate_totals(cell, draws, gram, ht, sample, spec)
        column = draws.draws[:, 1 * 3 + 1]  # (hours, d2) block position
        assert np.max(np.abs(totals.values - column) / np.abs(column)) < 1e-12

    def test_constant_draws_give_fixed_ht(self):
        sample, spec = survey_sample()
        gram = compute_gram(sample, spec)
        ht = ht_totals(sample, spec)
        draws = PosteriorDraws(
            draws=np.tile(ht, (4, 1)), chain_tags=np.zeros(4, dtype=int)
        )
        q = CellQuery(
            "emp_occ", "employed", CellFilter.build(attributes={"occupation": "sales"})
        )
        cell = evaluate_cell(q, sample, spec)
        totals = replicate_totals(cell, draws, gram, ht, sample, spec)
        assert np.allclose(totals.values, totals.fixed_ht, rtol=1e-12)

    def test_matches_full_recalibration_oracle(self):
        sample, spec = survey_sample()
        gram = compute_gram(sample, spec)
        ht = ht_totals(sample, spec)
        draws = synthetic_draws(ht, 10, seed=2)
        for q in (
            CellQuery("occ", "employed", CellFilter.build(attributes={"occupation": "managers"})),
            CellQuery("inc", "income", CellFilter.build(attributes={"occupation": "trades"})),
            CellQuery("band", "hours", CellFilter.build(ranges={"hours": (10, 30)})),
        ):
            cell = evaluate_cell(q, sample, spec)
            fast = replicate_totals(cell, draws, gram, ht, sample, spec)
            slow = recalibration_oracle(q, draws, gram, ht, sample, spec)
            scale = max(1.0, np.abs(slow).max())
            assert np.max(np.abs(fast.values - slow)) < 1e-10 * scale

    def test_partition_additivity_per_draw(self):
        # occupation levels partition the sample, so per-draw cell totals
        # must sum to the per-draw grand total
        sample, spec = survey_sample()
        gram = compute_gram(sample, spec)
        ht = ht_totals(sample, spec)
        draws = synthetic_draws(ht, 20, seed=3)
        parts = []
        for occ in ("managers", "trades", "sales"):
            q = CellQuery(occ, "employed", CellFilter.build(attributes={"occupation": occ}))
            cell = evaluate_cell(q, sample, spec)
            parts.append(replicate_totals(cell, draws, gram, ht, sample, spec).values)
        grand = replicate_totals(
            evaluate_cell(CellQuery("all", "employed", CellFilter()), sample, spec),
            draws,
            gram,
            ht,
            sample,
            spec,
        ).values
        assert np.max(np.abs(sum(parts) - grand)) < 1e-9 * np.abs(grand).max()

    def test_dimension_mismatch_rejected(self):
        sample, spec = survey_sample()
        gram = compute_gram(sample, spec)
        ht = ht_totals(sample, spec)
        bad = PosteriorDraws(draws=np.ones((5, 4)), chain_tags=np.zeros(5, dtype=int))
        cell = evaluate_cell(CellQuery("all", "employed", CellFilter()), sample, spec)
        with pytest.raises(DataError, match="columns"):
            replicate_totals(cell, bad, gram, ht, sample, spec)


class TestQuantiles:
    def test_interpolated_order_statistics(self):
        values = np.arange(1.0, 101.0)
        ci = empirical_quantile_ci(values, 0.95)
        assert ci.lower == pytest.approx(3.475, abs=1e-12)
        assert ci.upper == pytest.approx(97.525, abs=1e-12)

    def test_constant_values_degenerate(self):
        ci = empirical_quantile_ci(np.full(10, 7.0), 0.95)
        assert ci.lower == ci.upper == 7.0

    def test_symmetric_values_symmetric_interval(self):
        values = np.concatenate([np.linspace(-5, 5, 41)])
        ci = empirical_quantile_ci(values, 0.9)
        assert abs(ci.lower + ci.upper) < 1e-12

    def test_monotone_in_level(self):
        rng = np.random.default_rng(4)
        values = rng.normal(size=500)
        narrow = empirical_quantile_ci(values, 0.8)
        wide = empirical_quantile_ci(values, 0.95)
        assert wide.lower <= narrow.lower
        assert wide.upper >= narrow.upper

    def test_non_finite_rejected_with_count(self):
        values = np.array([1.0, np.nan, 2.0, np.inf])
        with pytest.raises(NumericalError, match="2 non-finite"):
            empirical_quantile_ci(values, 0.95)

    @pytest.mark.parametrize("level", [0.0, 1.0, -0.1, 1.7])
    def test_invalid_level(self, level):
        with pytest.raises(DataError, match="level"):
            empirical_quantile_ci(np.arange(10.0), level)

    def test_needs_two_values(self):
        with pytest.raises(DataError, match="at least 2"):
            empirical_quantile_ci(np.array([1.0]), 0.95)


class TestPointEstimate:
    def test_exact_cell_equals_posterior_mean_component(self):
        sample, spec = survey_sample()
        gram = compute_gram(sample, spec)
        ht = ht_totals(sample, spec)
        draws = synthetic_draws(ht, 30, seed=6)
        weights = calibrate(sample, gram, ht, draws.posterior_mean)
        q = CellQuery("emp_d1", "employed", CellFilter.build(domains="d1"))
        cell = evaluate_cell(q, sample, spec)
        point = point_estimate(cell, weights)
        assert point == pytest.approx(draws.posterior_mean[0], rel=1e-10)

    def test_empty_cell_is_zero(self):
        sample, spec = survey_sample()
        gram = compute_gram(sample, spec)
        ht = ht_totals(sample, spec)
        weights = calibrate(sample, gram, ht, ht)
        q = CellQuery(
            "none", "employed", CellFilter.build(attributes={"occupation": "astronaut"})
        )
        cell = evaluate_cell(q, sample, spec)
        assert point_estimate(cell, weights) == 0.0

    def test_hand_weighted_sum(self):
        sample, spec = make_random_sample(10, 2, 2, seed=1)
        gram = compute_gram(sample, spec)
        ht = ht_totals(sample, spec)
        weights = calibrate(sample, gram, ht, ht)  # identity calibration
        q = CellQuery("grp", "v2", CellFilter.build(attributes={"group": "a"}))
        cell = evaluate_cell(q, sample, spec)
        by_hand = sum(
            r.design_weight * r.calib_values[1]
            for r in sample.records
            if r.attributes["group"] == "a"
        )
        assert point_estimate(cell, weights) == pytest.approx(by_hand, rel=1e-12)
