import math

import numpy as np
import pytest

from conftest import spec_text
from estlab_errors import ImputationError
from estlab_imputation import (
    apply_delta,
    barnard_rubin_df,
    conditional_draw,
    fit_mar_model,
    impute,
    pool,
)
from estlab_planner import DEAD, IMPUTE, OBSERVE, parse_spec, resolve_plan
from estlab_simulator import derive_stream, simulate_replicate_block

AE_WITHDRAWAL = {"AeNormal": {"intercept": -2.0, "withdrawal_probability": 1.0}}
AE_PARTIAL_WITHDRAWAL = {"AeNormal": {"intercept": -2.0, "withdrawal_probability": 0.5}}
LARGE = {"name": "unit", "n_per_arm": 200, "seed": 4321, "visits": 4}


def run_impute(config, text, m=5, death_delta=0.0, replicate=0, copy_stream=0):
    block = simulate_replicate_block(config, replicate)
    spec = parse_spec(text)
    plan = resolve_plan(block, spec)
    imputed = impute(block, plan, spec, m, derive_stream(config.seed, 2, replicate, copy_stream),
                     death_delta=death_delta)
    return block, plan, imputed


def final_targets(block, plan, arm):
    return (block.assigned == arm) & (plan.decision[:, -1] == IMPUTE)


class TestMarModel:
    def test_posterior_draw_is_a_covariance(self, smoke_config):
        block = simulate_replicate_block(smoke_config, 0)
        model = fit_mar_model(block.observed, block.assigned == 1, arm=1)
        draw = model.draw(np.random.default_rng(1))
        assert draw.mean.shape == (5,)
        assert np.allclose(draw.cov, draw.cov.T)
        assert np.all(np.linalg.eigvalsh(draw.cov) > 0)

    def test_posterior_mean_tracks_the_data(self, smoke_config):
        block = simulate_replicate_block(smoke_config, 0)
        model = fit_mar_model(block.observed, block.assigned == 1, arm=1)
        draws = np.array([model.draw(np.random.default_rng(seed)).mean for seed in range(200)])
        sample_mean = block.observed[block.assigned == 1].mean(axis=0)
        assert np.allclose(draws.mean(axis=0), sample_mean, atol=0.25)

    def test_too_few_complete_cases(self):
        values = np.array([[10.0, 9.0, np.nan], [11.0, 8.0, np.nan], [9.0, 8.5, 7.0]])
        with pytest.raises(ImputationError, match="visit 2"):
            fit_mar_model(values, np.ones(3, dtype=bool))


class TestConditionalDraw:
    def test_conditional_moments(self):
        rng = np.random.default_rng(3)
        cov = np.array([[1.0, 0.8], [0.8, 1.0]])
        values = np.column_stack([np.ones(20000), np.full(20000, np.nan)])
        draws = conditional_draw(rng, np.zeros(2), cov, np.array([0]), np.array([1]), values)
        assert draws.mean() == pytest.approx(0.8, abs=0.02)
        assert draws.var() == pytest.approx(0.36, abs=0.02)

    def test_unconditional(self):
        rng = np.random.default_rng(4)
        values = np.full((10, 2), np.nan)
        draws = conditional_draw(rng, np.array([5.0, 6.0]), np.eye(2), np.array([], dtype=int),
                                 np.array([0, 1]), values)
        assert draws.shape == (10, 2)


class TestImpute:
    def test_no_targets_copies_observed(self, smoke_config, shipped_spec):
        block = simulate_replicate_block(smoke_config, 0)
        spec = shipped_spec("smoke")
        imputed = impute(block, resolve_plan(block, spec), spec, 3, derive_stream(1, 2, 0, 0))
        assert imputed.m == 3
        assert all(np.array_equal(imputed.values[copy], block.observed) for copy in range(3))

    def test_m_must_allow_pooling(self, smoke_config, shipped_spec):
        block = simulate_replicate_block(smoke_config, 0)
        spec = shipped_spec("smoke")
        with pytest.raises(ValueError):
            impute(block, resolve_plan(block, spec), spec, 1, derive_stream(1, 2, 0, 0))

    def test_fills_every_target_and_keeps_observed(self, make_scenario):
        config = make_scenario(ice=AE_WITHDRAWAL)
        block, plan, imputed = run_impute(config, spec_text())
        targets = plan.decision == IMPUTE
        assert targets.any()
        assert not np.isnan(imputed.values[:, targets]).any()
        kept = plan.decision == OBSERVE
        assert all(np.array_equal(imputed.values[copy][kept], block.observed[kept]) for copy in range(imputed.m))

    def test_copies_differ(self, make_scenario):
        _, plan, imputed = run_impute(make_scenario(ice=AE_WITHDRAWAL), spec_text())
        targets = plan.decision == IMPUTE
        assert not np.allclose(imputed.values[0][targets], imputed.values[1][targets])

    def test_reproducible_per_stream(self, make_scenario):
        config = make_scenario(ice=AE_WITHDRAWAL)
        first = run_impute(config, spec_text())[2]
        second = run_impute(config, spec_text())[2]
        other = run_impute(config, spec_text(), copy_stream=1)[2]
        assert np.array_equal(first.values, second.values)
        assert not np.array_equal(first.values, other.values)

    def test_method_delta_shifts_targets(self, make_scenario):
        config = make_scenario(ice=AE_WITHDRAWAL)
        _, plan, plain = run_impute(config, spec_text())
        _, _, shifted = run_impute(config, spec_text(imputations={"AeNormal.CDH": "mar delta=2.0"}))
        targets = plan.decision == IMPUTE
        assert np.allclose(shifted.values[:, targets] - plain.values[:, targets], 2.0)
        assert np.array_equal(shifted.values[:, ~targets], plain.values[:, ~targets])

    def test_death_delta_only_moves_post_death_cells(self, make_scenario):
        config = make_scenario(ice={"AeNormal": {"intercept": -2.0, "death_probability": 1.0}})
        _, plan, plain = run_impute(config, spec_text())
        _, _, shifted = run_impute(config, spec_text(), death_delta=1.0)
        dead = (plan.decision == IMPUTE) & plan.death
        assert dead.any()
        assert np.allclose(shifted.values[:, dead] - plain.values[:, dead], 1.0)
        assert np.array_equal(shifted.values[:, ~dead], plain.values[:, ~dead])

    def test_dead_cells_stay_missing(self, make_scenario):
        config = make_scenario(ice={"AeNormal": {"intercept": -2.0, "death_probability": 1.0}})
        text = spec_text({"AeNormal": "TreatmentPolicy"}, {"AeNormal.TreatmentPolicy": "mar"})
        _, plan, imputed = run_impute(config, text)
        dead = plan.decision == DEAD
        assert dead.any()
        assert np.isnan(imputed.values[:, dead]).all()

    def test_return_to_baseline_erases_the_effect(self, make_scenario):
        config = make_scenario(scenario=LARGE, ice=AE_WITHDRAWAL)
        text = spec_text({"AeNormal": "NTH"}, {"AeNormal.NTH": "return_to_baseline"})
        block, plan, imputed = run_impute(config, text)
        treated = final_targets(block, plan, 1)
        assert imputed.values[:, treated, -1].mean() == pytest.approx(10.0, abs=1.0)

    def test_mar_keeps_the_arm_trajectory(self, make_scenario):
        config = make_scenario(scenario=LARGE, ice=AE_WITHDRAWAL)
        block, plan, imputed = run_impute(config, spec_text())
        treated = final_targets(block, plan, 1)
        assert imputed.values[:, treated, -1].mean() == pytest.approx(6.0, abs=1.0)

    def test_jump_to_reference(self, make_scenario):
        config = make_scenario(scenario=LARGE, ice=AE_WITHDRAWAL)
        block, plan, imputed = run_impute(config, spec_text(imputations={"AeNormal.CDH": "jump_to_reference"}))
        treated = final_targets(block, plan, 1)
        assert imputed.values[:, treated, -1].mean() == pytest.approx(10.0, abs=1.0)

    def test_jump_to_reference_on_the_reference_arm_is_mar(self, make_scenario):
        config = make_scenario(scenario=LARGE, ice=AE_WITHDRAWAL)
        block, plan, mar = run_impute(config, spec_text())
        _, _, j2r = run_impute(config, spec_text(imputations={"AeNormal.CDH": "jump_to_reference"}))
        placebo = final_targets(block, plan, 0)
        treated = final_targets(block, plan, 1)
        assert placebo.any()
        assert np.allclose(j2r.values[:, placebo], mar.values[:, placebo])
        assert not np.allclose(j2r.values[:, treated], mar.values[:, treated])

    def test_copy_reference_carries_the_treated_departure(self, make_scenario):
        config = make_scenario(scenario=LARGE, ice=AE_WITHDRAWAL)
        block, plan, mar = run_impute(config, spec_text())
        _, _, j2r = run_impute(config, spec_text(imputations={"AeNormal.CDH": "jump_to_reference"}))
        _, _, copy_ref = run_impute(config, spec_text(imputations={"AeNormal.CDH": "copy_reference"}))
        treated = final_targets(block, plan, 1)
        placebo = final_targets(block, plan, 0)
        assert np.allclose(copy_ref.values[:, placebo], mar.values[:, placebo])
        final = {name: imputed.values[:, treated, -1].mean() for name, imputed in
                 (("mar", mar), ("j2r", j2r), ("copy_reference", copy_ref))}
        assert final["mar"] < final["copy_reference"] < final["j2r"]
        assert final["copy_reference"] == pytest.approx(10.0, abs=1.5)

    def test_shipped_retrieved_dropout_scenario_has_donors(self, shipped_scenario, shipped_spec):
        config = shipped_scenario("retrieved_dropout")
        spec = shipped_spec("retrieved_dropout")
        for replicate in range(5):
            block = simulate_replicate_block(config, replicate)
            plan = resolve_plan(block, spec)
            imputed = impute(block, plan, spec, 2, derive_stream(config.seed, 2, replicate, 0))
            assert not np.isnan(imputed.values[:, plan.decision == IMPUTE]).any()

    def test_retrieved_dropout_uses_post_ice_observations(self, make_scenario):
        config = make_scenario(scenario=LARGE, ice=AE_PARTIAL_WITHDRAWAL, treatment={"washout": 0.0})
        text = spec_text({"AeNormal": "NTH"}, {"AeNormal.NTH": "retrieved_dropout"})
        block, plan, imputed = run_impute(config, text)
        treated = final_targets(block, plan, 1)
        assert treated.any()
        assert imputed.values[:, treated, -1].mean() == pytest.approx(10.0, abs=1.0)

    def test_retrieved_dropout_without_donors(self, make_scenario):
        text = spec_text(imputations={"AeNormal.CDH": "retrieved_dropout"})
        with pytest.raises(ImputationError, match="retrieved dropout"):
            run_impute(make_scenario(ice=AE_WITHDRAWAL), text)

    def test_retrieved_dropout_cannot_fill_non_ice_gaps(self, make_scenario):
        config = make_scenario(missingness={"extra": 0.1})
        with pytest.raises(ImputationError, match="NonIce"):
            run_impute(config, spec_text(imputations={"NonIce": "retrieved_dropout"}))

    def test_special_pattern_shifts_by_donor_departure(self, make_scenario):
        config = make_scenario(scenario=LARGE, ice={
            "AeNormal": {"intercept": -2.0, "withdrawal_probability": 1.0},
            "LackOfEfficacy": {"intercept": -7.0, "outcome": 0.5},
        })
        text = spec_text(imputations={"AeNormal.CDH": "special_pattern(LackOfEfficacy)"})
        block, plan, pattern = run_impute(config, text)
        _, _, plain = run_impute(config, spec_text())
        treated = final_targets(block, plan, 1)
        assert pattern.values[:, treated, -1].mean() > plain.values[:, treated, -1].mean()

    def test_export_frame(self, make_scenario):
        _, plan, imputed = run_impute(make_scenario(ice=AE_WITHDRAWAL), spec_text(), m=2)
        frame = imputed.export_frame()
        assert list(frame.columns) == ["replicate", "copy", "patient", "visit", "value", "provenance", "method"]
        assert len(frame) == imputed.values.size
        assert set(frame["provenance"]) == {"Observed", "Imputed"}
        assert set(frame.loc[frame["provenance"] == "Imputed", "method"]) == {"MarMI"}
        assert set(frame.loc[frame["provenance"] == "Observed", "method"]) == {""}

    def test_copy_frame(self, make_scenario):
        _, _, imputed = run_impute(make_scenario(ice=AE_WITHDRAWAL), spec_text(), m=2)
        frame = imputed.copy_frame(1)
        assert list(frame.columns) == ["patient", "arm", "y0", "y1", "y2", "y3", "y4"]

    def test_apply_delta(self, make_scenario):
        _, plan, imputed = run_impute(make_scenario(ice=AE_WITHDRAWAL), spec_text(), m=2)
        targets = plan.decision == IMPUTE
        shifted = apply_delta(imputed, 0.5, targets)
        assert np.allclose(shifted.values[:, targets] - imputed.values[:, targets], 0.5)
        with pytest.raises(ImputationError):
            apply_delta(imputed, 0.5, ~targets)

    def test_method_delta_is_a_post_draw_shift(self, make_scenario):
        config = make_scenario(ice=AE_WITHDRAWAL)
        _, plan, plain = run_impute(config, spec_text())
        _, _, shifted = run_impute(config, spec_text(imputations={"AeNormal.CDH": "mar delta=-1.5"}))
        expected = apply_delta(plain, -1.5, plan.decision == IMPUTE)
        assert np.allclose(shifted.values, expected.values, equal_nan=True)


class TestPool:
    def test_rubin_rules(self):
        pooled = pool([(1.0, 1.0), (3.0, 1.0)])
        assert pooled.point == 2.0
        assert pooled.within_var == 1.0
        assert pooled.between_var == 2.0
        assert pooled.total_var == 4.0
        assert pooled.se == 2.0
        assert pooled.ci[0] < 2.0 < pooled.ci[1]

    def test_barnard_rubin_degrees_of_freedom(self):
        assert barnard_rubin_df(5, 1.0, 0.5, 100.0) == pytest.approx(1616000 / 83180.5, rel=1e-12)

    def test_no_between_variance(self):
        assert barnard_rubin_df(5, 1.0, 0.0) == math.inf
        assert barnard_rubin_df(5, 1.0, 0.0, 50.0) == pytest.approx(51.0 / 53.0 * 50.0)

    def test_large_sample_interval(self):
        pooled = pool([(1.0, 0.25), (1.0, 0.25), (1.0, 0.25)])
        assert pooled.df == math.inf
        assert pooled.ci == pytest.approx((1.0 - 1.959964 * 0.5, 1.0 + 1.959964 * 0.5), abs=1e-6)
        assert pooled.covers(1.5)
        assert not pooled.covers(2.5)

    def test_undefined_variance(self):
        pooled = pool([(1.0, math.nan), (2.0, math.nan)])
        assert pooled.point == 1.5
        assert math.isnan(pooled.df)
        assert math.isnan(pooled.p_value)
        assert not pooled.covers(1.5)

    def test_p_value(self):
        assert pool([(0.0, 1.0), (0.0, 1.0)]).p_value == pytest.approx(1.0)
        assert pool([(10.0, 0.01), (10.0, 0.01)]).p_value < 1e-6

    def test_needs_two_estimates(self):
        with pytest.raises(ValueError):
            pool([(1.0, 1.0)])
