import pytest

from StudyRunner import StudyRunner, run_replicate, run_study
from estlab_errors import EstimandLabError, SpecValidationError, StudyAbortedError

SMALL = {"replicates": 4, "imputations": 5, "n_oracle": 2000}
NO_DONORS = {"AeNormal": {"intercept": 0.0, "withdrawal_probability": 1.0}}


class TestConstructor:
    @pytest.mark.parametrize("settings", [
        {"replicates": 0},
        {"imputations": 1},
        {"failure_budget": 1.5},
        {"failure_budget": -0.1},
    ])
    def test_bad_settings(self, smoke_config, shipped_spec, settings):
        with pytest.raises(ValueError):
            StudyRunner(smoke_config, shipped_spec("smoke"), **settings)

    def test_imputations_default_to_the_spec(self, smoke_config, shipped_spec):
        spec = shipped_spec("smoke")
        assert StudyRunner(smoke_config, spec).imputations == spec.m == 5
        assert StudyRunner(smoke_config, spec, imputations=3).imputations == 3

    def test_budget(self, smoke_config, shipped_spec):
        runner = StudyRunner(smoke_config, shipped_spec("smoke"), replicates=25, failure_budget=0.1)
        assert runner.budget == 2
        assert not runner.successful()
        assert "smoke" in str(runner)


class TestSmokeStudy:
    def test_truths(self, smoke_config, shipped_spec, logger):
        runner = StudyRunner(smoke_config, shipped_spec("smoke"), logger=logger, **SMALL)
        runner.prepare()
        assert runner.truths == {"primary": -4.0, "shifted": -4.0}

    def test_run(self, smoke_config, shipped_spec, logger):
        runner = StudyRunner(smoke_config, shipped_spec("smoke"), logger=logger, **SMALL)
        summary = runner.run()
        assert runner.successful()
        assert summary.replicates == 4
        assert summary.failed == 0
        row = summary.row("primary")
        assert row.n_replicates == 4
        assert row.truth == -4.0
        assert 0.0 <= row.coverage <= 1.0

    def test_complete_data_ignores_the_shift(self, smoke_config, shipped_spec):
        summary = run_study(smoke_config, shipped_spec("smoke"), **SMALL)
        assert summary.row("shifted").bias == pytest.approx(summary.row("primary").bias)

    def test_reproducible(self, smoke_config, shipped_spec):
        assert run_study(smoke_config, shipped_spec("smoke"), **SMALL) == \
            run_study(smoke_config, shipped_spec("smoke"), **SMALL)

    def test_worker_count_does_not_change_results(self, smoke_config, shipped_spec):
        serial = run_study(smoke_config, shipped_spec("smoke"), jobs=1, **SMALL)
        parallel = run_study(smoke_config, shipped_spec("smoke"), jobs=2, **SMALL)
        assert serial == parallel

    def test_show_state_and_data(self, smoke_config, shipped_spec, capsys):
        runner = StudyRunner(smoke_config, shipped_spec("smoke"), **SMALL)
        runner.prepare()
        runner.show_state()
        runner.show_data("truths", runner.truths)
        out = capsys.readouterr().out
        assert "_StudyRunner__imputations" in out
        assert "'primary': -4.0" in out

    def test_frames(self, smoke_config, shipped_spec):
        runner = StudyRunner(smoke_config, shipped_spec("smoke"), **SMALL)
        runner.run()
        frame = runner.replicate_frame()
        assert len(frame) == 4 * 2
        assert set(frame["estimand"]) == {"primary", "shifted"}
        assert runner.failure_frame().empty
        assert list(runner.failure_frame().columns) == ["replicate", "error"]


class TestFailures:
    def test_budget_exceeded(self, make_scenario, shipped_spec, logger):
        runner = StudyRunner(make_scenario(ice=NO_DONORS), shipped_spec("retrieved_dropout"),
                             replicates=3, imputations=2, failure_budget=0.0, n_oracle=2000, logger=logger)
        with pytest.raises(StudyAbortedError) as raised:
            runner.run()
        assert raised.value.failed == 1
        assert raised.value.budget == 0
        assert raised.value.partial.failed == 1
        assert runner.aborted()
        assert not runner.successful()
        failures = runner.failure_frame()
        assert failures["replicate"].tolist() == [0]
        assert "retrieved dropouts" in failures["error"][0]

    def test_failures_within_budget(self, make_scenario, shipped_spec):
        runner = StudyRunner(make_scenario(ice=NO_DONORS), shipped_spec("retrieved_dropout"),
                             replicates=2, imputations=2, failure_budget=1.0, n_oracle=2000)
        summary = runner.run()
        assert summary.failed == 2
        assert summary.row("primary").n_replicates == 0

    def test_failed_replicate_is_returned(self, make_scenario, shipped_spec):
        config = make_scenario(ice=NO_DONORS)
        spec = shipped_spec("retrieved_dropout")
        result = run_replicate(config, [("primary", spec, 0.0)], {"primary": 0.0}, 2, 5)
        assert result.failed
        assert result.replicate_index == 5

    def test_invalid_spec(self, shipped_scenario, shipped_spec):
        runner = StudyRunner(shipped_scenario("full_featured"), shipped_spec("tp_pandemic"), **SMALL)
        with pytest.raises(SpecValidationError):
            runner.prepare()

    def test_principal_stratum_population_is_truth_only(self, shipped_scenario, shipped_spec):
        runner = StudyRunner(shipped_scenario("full_featured"), shipped_spec("principal_stratum"), **SMALL)
        with pytest.raises(EstimandLabError, match="truth subcommand"):
            runner.prepare()


@pytest.mark.slow
@pytest.mark.parametrize("name", ["mar_loe", "return_to_baseline", "jump_to_reference", "retrieved_dropout"])
def test_assumption_matched_study_is_calibrated(shipped_scenario, shipped_spec, name):
    summary = run_study(shipped_scenario(name), shipped_spec(name), replicates=2000, imputations=20,
                        jobs=4, n_oracle=200_000)
    row = summary.row("primary")
    assert summary.failed == 0
    assert abs(row.bias) <= 3.0 * row.bias_mc_se
    assert 0.93 <= row.coverage <= 0.97
