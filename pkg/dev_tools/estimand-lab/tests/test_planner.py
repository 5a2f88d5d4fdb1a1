import numpy as np
import pytest

from conftest import spec_text
from estlab_errors import PlanResolutionError, SpecParseError
from estlab_model import EventDescriptor, EventKind, IceCause, IceEvent
from estlab_planner import (
    DEAD,
    DEAD_CELL,
    IMPUTE,
    NON_ICE_KEY,
    OBSERVE,
    USE_OBSERVED,
    DiscardAndImpute,
    EstimandStrategy,
    ImputationMethod,
    Population,
    decide_cells,
    default_plan,
    estimand_variants,
    load_spec,
    parse_spec,
    resolve_patient_strategy,
    resolve_plan,
    serialize_spec,
    validate_spec,
)
from estlab_simulator import block_records, simulate_replicate_block


def rules(issues):
    return {issue.rule for issue in issues}


def event(cause, visit, kind=EventKind.Discontinuation):
    return IceEvent(cause, visit, kind)


class TestParseSpec:
    def test_shipped_smoke_spec(self, shipped_spec):
        spec = shipped_spec("smoke")
        assert spec.name == "smoke_cdh"
        assert spec.m == 5
        assert spec.loe_prior_visits_collected
        assert [variant.name for variant in spec.sensitivity] == ["shifted"]
        assert spec.sensitivity[0].imputations == ((NON_ICE_KEY, ImputationMethod("mar", delta=1.0)),)

    def test_default_plan_file_is_canonical(self, config_path):
        text = (config_path / "default_plan.spec").read_text(encoding="utf-8")
        assert text == serialize_spec(default_plan())
        assert parse_spec(text) == default_plan()

    def test_composite_section(self, shipped_spec):
        spec = shipped_spec("composite_endpoint")
        assert spec.endpoint == "composite"
        assert spec.summary == "difference_in_proportions"
        assert spec.composite.threshold == -2.0
        assert EventDescriptor(cause=IceCause.AeNormal) in spec.composite.failure_events

    def test_population_bounds(self):
        spec = parse_spec(spec_text(estimand="population = baseline_subset\nbaseline_lower = 8.0"))
        assert spec.population == Population("baseline_subset", lower=8.0)

    @pytest.mark.parametrize("text, line, message", [
        ("[estimand]\nname = x\nfoo = 1\n", 3, "unknown key 'foo'"),
        ("[bogus]\n", 1, "unknown section"),
        ("name = x\n", 1, "outside of a section"),
        ("[estimand]\nname = x\n[estimand]\n", 3, "duplicate section"),
        ("[estimand]\nname = x\nname = y\n", 3, "duplicate key"),
        ("[strategy]\nAeNormal = CDH\nAeNormal = NTH\n", 3, "duplicate key"),
        ("[strategy]\nMeteor = CDH\n", 2, "unknown key 'Meteor'"),
        ("[strategy]\nAeNormal = Hypothetical\n", 2, "malformed value"),
        ("[imputation]\nAeNormal.CDH = hot_deck\n", 2, "malformed value"),
        ("[estimand]\n\n\nendpoint = composite\n", 4, r"needs a \[composite\] section"),
        ("[estimand]\nno equals sign\n", 2, "expected 'key = value'"),
    ])
    def test_parse_errors_carry_line(self, text, line, message):
        with pytest.raises(SpecParseError, match=message) as error:
            parse_spec(text)
        assert error.value.line == line

    def test_value_column(self):
        with pytest.raises(SpecParseError) as error:
            parse_spec("[estimand]\nimputations = 1\n")
        assert (error.value.line, error.value.column) == (2, 15)

    def test_summary_must_fit_endpoint(self):
        with pytest.raises(SpecParseError, match="does not fit"):
            parse_spec("[estimand]\nsummary = difference_in_proportions\n")

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_spec(tmp_path / "absent.spec")

    def test_load_undecodable_file(self, tmp_path):
        path = tmp_path / "latin1.spec"
        path.write_bytes(b"[estimand]\nname = caf\xe9\n")
        with pytest.raises(SpecParseError, match="not valid UTF-8") as error:
            load_spec(path)
        assert (error.value.line, error.value.column) == (2, 11)

    @pytest.mark.parametrize("name", ["smoke", "mar_loe", "jump_to_reference", "retrieved_dropout",
                                      "return_to_baseline", "composite_endpoint", "principal_stratum",
                                      "tp_pandemic", "default_plan"])
    def test_serialized_spec_parses_back(self, shipped_spec, name):
        spec = shipped_spec(name)
        text = serialize_spec(spec)
        assert parse_spec(text) == spec
        assert serialize_spec(parse_spec(text)) == text


class TestValueTypes:
    @pytest.mark.parametrize("text, label", [
        ("CDH", "CDH"),
        ("DTR(11.0)", "DTR(11.0)"),
        ("PrincipalStratum( 8, NTH )", "PrincipalStratum(8.0, NTH)"),
    ])
    def test_strategy_parse(self, text, label):
        assert EstimandStrategy.parse(text).label == label

    def test_nested_principal_stratum_rejected(self):
        with pytest.raises(ValueError):
            EstimandStrategy.parse("PrincipalStratum(1, PrincipalStratum(2, CDH))")

    def test_method_parse(self):
        method = ImputationMethod.parse("special_pattern(LackOfEfficacy) delta=0.5")
        assert method.donor is IceCause.LackOfEfficacy
        assert method.delta == 0.5
        assert method.text == "special_pattern(LackOfEfficacy) delta=0.5"

    def test_method_shift(self):
        assert ImputationMethod("mar").shifted(1.5) == ImputationMethod("mar", delta=1.5)

    @pytest.mark.parametrize("text", ["special_pattern", "mar delta=nan", "mar width=2"])
    def test_method_rejects(self, text):
        with pytest.raises(ValueError):
            ImputationMethod.parse(text)

    def test_population_mask(self):
        baseline = np.array([7.0, 9.0, 11.0])
        assert Population("baseline_subset", 8.0, 10.0).mask(baseline).tolist() == [False, True, False]
        assert Population("principal_stratum", threshold=8.0).mask(baseline, baseline).tolist() == [False, True, True]
        assert Population().mask(baseline).all()


class TestStrategyLookup:
    def test_most_specific_entry_wins(self):
        text = spec_text(strategies={"LackOfEfficacy": "NTH", "RescueStart": "PTH",
                                     "LackOfEfficacy/RescueStart": "CDH"})
        spec = parse_spec(text)
        assert spec.strategy_for(IceCause.LackOfEfficacy, EventKind.RescueStart).kind == "CDH"
        assert spec.strategy_for(IceCause.AeNormal, EventKind.RescueStart).kind == "PTH"
        assert spec.strategy_for(IceCause.LackOfEfficacy, EventKind.Discontinuation).kind == "NTH"

    def test_regimen_events_have_no_strategy(self):
        spec = parse_spec(spec_text(extra="[regimen]\npart_of_regimen = RescueStart\n"))
        assert spec.strategy_for(IceCause.LackOfEfficacy, EventKind.RescueStart) is None

    def test_variant_override(self):
        spec = default_plan()
        variant = spec.with_variant(spec.sensitivity[0])
        assert variant.name == "default_plan:pth_retrieved_dropout"
        assert variant.strategy_for(IceCause.AeNormal, EventKind.Discontinuation).kind == "PTH"
        strategy = variant.strategy_map[EventDescriptor(IceCause.AeNormal)]
        assert variant.method_for(IceCause.AeNormal, strategy).kind == "retrieved_dropout"
        assert variant.sensitivity == ()

    def test_estimand_variants(self):
        labels = [label for label, _, _ in estimand_variants(default_plan())]
        assert labels == ["primary", "pth_retrieved_dropout", "nth_retrieved_dropout", "loe_special_pattern",
                          "ltfu_special_pattern", "death_delta=1.0", "death_delta=2.0"]
        deltas = [delta for _, _, delta in estimand_variants(default_plan())]
        assert deltas[-2:] == [1.0, 2.0]
        assert all(delta == 0.0 for delta in deltas[:-2])


class TestValidateSpec:
    def test_default_plan_is_clean(self):
        report = validate_spec(default_plan())
        assert report.ok
        assert report.warnings == ()
        assert report.resolved_spec is not None

    def test_resolved_plan_rows(self):
        rows = validate_spec(default_plan()).as_dict()["resolved_plan"]
        assert {"event": "AeNormal/Discontinuation", "strategy": "NTH", "imputation": "return_to_baseline"} in rows
        assert {"event": "NonIce", "strategy": "", "imputation": "mar"} in rows

    def test_treatment_policy_for_pandemic_event(self, shipped_spec):
        report = validate_spec(shipped_spec("tp_pandemic"))
        assert not report.ok
        assert "R1" in rules(report.errors)

    def test_composite_is_not_a_strategy(self, shipped_spec):
        assert "R3" in rules(validate_spec(shipped_spec("composite_strategy")).errors)

    def test_missing_strategy(self):
        report = validate_spec(parse_spec(spec_text(strategies={"AdminDocumented": None})))
        assert "R0" in rules(report.errors)
        assert any("AdminDocumented/Discontinuation" in issue.message for issue in report.errors)

    def test_regimen_circularity(self):
        text = spec_text(strategies={"LackOfEfficacy/RescueStart": "CDH"},
                         extra="[regimen]\npart_of_regimen = RescueStart\n")
        report = validate_spec(parse_spec(text))
        assert any(issue.rule == "R0" and "regimen" in issue.message for issue in report.errors)

    def test_missing_imputation(self):
        report = validate_spec(parse_spec(spec_text(imputations={"NonIce": None})))
        assert "R6" in rules(report.errors)

    def test_principal_stratum_strategy(self):
        text = spec_text(strategies={"LackOfEfficacy": "PrincipalStratum(8.0, CDH)"})
        assert "R7" in rules(validate_spec(parse_spec(text)).errors)

    def test_treatment_policy_warns_unless_pragmatic(self):
        overrides = dict(strategies={"AeNormal": "TreatmentPolicy"}, imputations={"AeNormal.TreatmentPolicy": "mar"})
        report = validate_spec(parse_spec(spec_text(**overrides)))
        assert report.ok
        assert rules(report.warnings) == {"R2"}
        pragmatic = spec_text(estimand="loe_prior_visits_collected = true\npragmatic = true", **overrides)
        assert validate_spec(parse_spec(pragmatic)).warnings == ()

    def test_retrieved_dropout_without_post_ice_data(self):
        report = validate_spec(parse_spec(spec_text(imputations={"AdminLostToFollowUp.CDH": "retrieved_dropout"})))
        assert rules(report.warnings) == {"R4"}

    def test_retrieved_dropout_checked_against_scenario(self, make_scenario):
        config = make_scenario(ice={"AeNormal": {"intercept": -3.0, "withdrawal_probability": 1.0}})
        report = validate_spec(parse_spec(spec_text(imputations={"AeNormal.CDH": "retrieved_dropout"})), config)
        assert "R4" in rules(report.warnings)

    def test_loe_cdh_without_prior_visits(self):
        report = validate_spec(parse_spec(spec_text(estimand="")))
        assert rules(report.warnings) == {"R5"}

    def test_loe_sensitivity_silences_prior_visit_warning(self):
        extra = "\n[sensitivity.loe]\nLackOfEfficacy.CDH = mar delta=1.0\n"
        report = validate_spec(parse_spec(spec_text(estimand="", extra=extra)))
        assert "R5" not in rules(report.warnings)

    def test_reference_method_with_active_reference(self):
        text = spec_text(estimand="loe_prior_visits_collected = true\nreference_is_placebo = false",
                         imputations={"AeNormal.CDH": "jump_to_reference"})
        assert rules(validate_spec(parse_spec(text)).warnings) == {"R8"}

    def test_variant_errors_are_prefixed(self):
        extra = "\n[sensitivity.bad]\nAePandemic = TreatmentPolicy\nAePandemic.TreatmentPolicy = mar\n"
        report = validate_spec(parse_spec(spec_text(extra=extra)))
        assert any(issue.rule == "R1" and "[sensitivity.bad]" in issue.message for issue in report.errors)

    def test_scenario_narrows_event_universe(self, smoke_config):
        spec = parse_spec("[imputation]\nNonIce = mar\n")
        assert validate_spec(spec, smoke_config).ok
        assert not validate_spec(spec).ok

    def test_report_text(self, shipped_spec):
        text = validate_spec(shipped_spec("tp_pandemic")).text()
        assert text.startswith("ERROR R1:")
        assert "resolved plan:" in text


class TestDecideCells:
    missing = [False] * 5
    reasons = [""] * 5

    def decide(self, events, strategies=None, imputations=None, missing=None, reasons=None, extra=""):
        spec = parse_spec(spec_text(strategies, imputations, extra=extra))
        return decide_cells(events, missing or self.missing, reasons or self.reasons, spec)

    def test_cdh_discards_after_the_event_visit(self):
        decisions = self.decide([event(IceCause.AeNormal, 2)])
        assert decisions[:3] == (USE_OBSERVED,) * 3
        assert decisions[3] == DiscardAndImpute(ImputationMethod("mar"), (IceCause.AeNormal, "CDH"), False, 2)
        assert isinstance(decisions[4], DiscardAndImpute)

    def test_nth_discards_from_the_event_visit(self):
        decisions = self.decide([event(IceCause.AeNormal, 2)], {"AeNormal": "NTH"},
                                {"AeNormal.NTH": "return_to_baseline"})
        assert decisions[:2] == (USE_OBSERVED,) * 2
        assert all(isinstance(decision, DiscardAndImpute) for decision in decisions[2:])
        assert decisions[2].method.kind == "return_to_baseline"

    def test_pth_keeps_post_discontinuation_data(self):
        decisions = self.decide([event(IceCause.AeNormal, 2)], {"AeNormal": "PTH"}, {"AeNormal.PTH": "mar"})
        assert decisions == (USE_OBSERVED,) * 5

    def test_pth_imputes_withdrawn_cells(self):
        decisions = self.decide([event(IceCause.AeNormal, 2)], {"AeNormal": "PTH"}, {"AeNormal.PTH": "mar"},
                                missing=[False, False, False, True, True],
                                reasons=["", "", "", "AeNormal/Discontinuation", "AeNormal/Discontinuation"])
        assert decisions[3].key == (IceCause.AeNormal, "PTH")

    def test_pth_discards_after_rescue(self):
        decisions = self.decide([event(IceCause.LackOfEfficacy, 1, EventKind.RescueStart)],
                                {"LackOfEfficacy": "PTH"}, {"LackOfEfficacy.PTH": "mar"})
        assert decisions[1] is USE_OBSERVED
        assert isinstance(decisions[2], DiscardAndImpute)

    def test_pth_discontinuation_then_rescue(self):
        events = [event(IceCause.AeNormal, 1), event(IceCause.LackOfEfficacy, 2, EventKind.RescueStart)]
        decisions = self.decide(events, {"AeNormal": "PTH"}, {"AeNormal.PTH": "mar"})
        assert decisions[:3] == (USE_OBSERVED,) * 3
        assert [decision.key for decision in decisions[3:]] == [(IceCause.LackOfEfficacy, "CDH")] * 2
        assert decisions[3].ice_visit == 2

    def test_treatment_policy_keeps_everything(self):
        decisions = self.decide([event(IceCause.AeNormal, 1)], {"AeNormal": "TreatmentPolicy"},
                                {"AeNormal.TreatmentPolicy": "mar"})
        assert decisions == (USE_OBSERVED,) * 5

    def test_cells_after_death_are_dead_under_treatment_policy(self):
        decisions = self.decide([event(IceCause.AeNormal, 2, EventKind.Death)], {"AeNormal": "TreatmentPolicy"},
                                {"AeNormal.TreatmentPolicy": "mar"}, missing=[False, False, False, True, True],
                                reasons=["", "", "", "AeNormal/Death", "AeNormal/Death"])
        assert decisions[3:] == (DEAD_CELL, DEAD_CELL)

    def test_cells_after_death_are_flagged_under_cdh(self):
        decisions = self.decide([event(IceCause.AeNormal, 2, EventKind.Death)], missing=[False, False, False, True, True],
                                reasons=["", "", "", "AeNormal/Death", "AeNormal/Death"])
        assert decisions[3].death and decisions[4].death

    def test_earliest_discard_wins(self):
        events = [event(IceCause.LackOfEfficacy, 1, EventKind.RescueStart), event(IceCause.AeNormal, 3)]
        decisions = self.decide(events, {"AeNormal": "NTH"}, {"AeNormal.NTH": "mar"})
        assert [decision.key for decision in decisions[2:]] == [(IceCause.LackOfEfficacy, "CDH")] * 3

    def test_non_ice_gap(self):
        decisions = self.decide([], missing=[False, False, True, False, False], reasons=["", "", "NonIce", "", ""])
        assert decisions[2].key == NON_ICE_KEY
        assert decisions[3] is USE_OBSERVED

    def test_regimen_event_is_ignored(self):
        decisions = self.decide([event(IceCause.LackOfEfficacy, 1, EventKind.RescueStart)],
                                extra="[regimen]\npart_of_regimen = RescueStart\n")
        assert decisions == (USE_OBSERVED,) * 5

    def test_unhandled_event(self):
        with pytest.raises(PlanResolutionError):
            self.decide([event(IceCause.AdminDocumented, 1)], {"AdminDocumented": None})


class TestResolvePlan:
    def test_withdrawn_cells_are_imputed(self, make_scenario, logger):
        config = make_scenario(ice={"AeNormal": {"intercept": 50.0, "withdrawal_probability": 1.0}})
        block = simulate_replicate_block(config, 0)
        plan = resolve_plan(block, parse_spec(spec_text()), logger=logger)
        assert (plan.decision[:, :2] == OBSERVE).all()
        assert (plan.decision[:, 2:] == IMPUTE).all()
        assert plan.n_targets == block.size * 3
        assert plan.keys == [(IceCause.AeNormal, "CDH")]
        assert (plan.ice_visit[:, 2:] == 1).all()
        assert (plan.ice_cause[:, 2:] == IceCause.AeNormal.index).all()

    def test_complete_data_needs_nothing(self, smoke_config, shipped_spec):
        plan = resolve_plan(simulate_replicate_block(smoke_config, 0), shipped_spec("smoke"))
        assert plan.n_targets == 0
        assert plan.methods == []

    def test_death_cells(self, make_scenario):
        config = make_scenario(ice={"AeNormal": {"intercept": 50.0, "death_probability": 1.0}})
        text = spec_text({"AeNormal": "TreatmentPolicy"}, {"AeNormal.TreatmentPolicy": "mar"})
        plan = resolve_plan(simulate_replicate_block(config, 0), parse_spec(text))
        assert (plan.decision[:, 2:] == DEAD).all()
        assert plan.death[:, 2:].all()
        assert plan.n_targets == 0

    def test_patient_view_matches_the_plan(self, make_scenario):
        config = make_scenario(ice={"AeNormal": {"intercept": -1.0, "withdrawal_probability": 0.5},
                                    "LackOfEfficacy": {"intercept": -2.0}})
        block = simulate_replicate_block(config, 0)
        spec = parse_spec(spec_text({"AeNormal": "PTH"}, {"AeNormal.PTH": "mar"}))
        plan = resolve_plan(block, spec)
        records = block_records(block)
        assert len(records) == block.size
        for record in records:
            decisions = resolve_patient_strategy(record, spec)
            imputed = [isinstance(decision, DiscardAndImpute) for decision in decisions]
            assert imputed == (plan.decision[record.id] == IMPUTE).tolist()
