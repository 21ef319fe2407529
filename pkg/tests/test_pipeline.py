"""Tests for the study stages and the command-line entry point."""

import json

import pytest

from shared.types import BoundReport, BoundVariant, Verdict
from tdmix import cli, io, pipeline
from tdmix.config import DiagnosticsConfig, parse_config
from tdmix.errors import MissingArtifact


@pytest.fixture
def config(minimal_config):
    return parse_config(minimal_config)


@pytest.fixture
def relu_config(minimal_config):
    """ReLU variant of the minimal study with small crossing and reference budgets."""
    data = json.loads(json.dumps(minimal_config))
    data["model"] = {"kind": "relu", "hidden": [4], "budget": 1.5}
    data["diagnostics"].update(crossing_T=30, gradient_draws=20, reference_T=300)
    return parse_config(data)


def _verdicts(report):
    return {line.name: line.verdict for line in report.lines}


def _stage_verdicts(payload):
    return {line["name"]: line["verdict"] for line in payload["diagnostics"]}


def _renewal_mixing(minimal_config):
    data = json.loads(json.dumps(minimal_config))
    data["chain"] = {"kind": "renewal", "kappa": 2.0, "n_states": 200}
    data["windows"]["mixing"] = [5, 80]
    return data


class TestRunPipeline:
    """Tests for full and partial study runs."""

    def test_minimal_run(self, config, tmp_path):
        """All stage artifacts, the report and the manifest are written."""
        out = tmp_path / "study"
        report = pipeline.run_pipeline(config, out, threads=1)
        for name in pipeline.REPORT_INPUTS:
            assert (out / name).is_file()
        assert (out / "histories" / "history_0000.csv").is_file()
        assert (out / "histories" / "history_0000.json").is_file()
        assert (out / "report.txt").is_file()
        manifest = io.read_json(out / io.MANIFEST_NAME)
        assert "kernel.json" in manifest["files"]

        verdicts = _verdicts(report)
        assert verdicts["lyapunov-drift"] == Verdict.NA
        assert verdicts["error-decomposition"] == Verdict.PASS
        assert verdicts["polynomial-ergodicity"] == Verdict.NA
        assert io.read_json(out / "mixing.json")["geometric_regime"] is True
        assert verdicts["covariance-between-blocks"] == Verdict.NA
        assert verdicts["region-crossings"] == Verdict.NA
        assert verdicts["high-probability-bound"] == Verdict.NA

    def test_reproducible(self, config, tmp_path):
        """Two runs of one config produce byte-identical artifacts."""
        pipeline.run_pipeline(config, tmp_path / "a", threads=1)
        pipeline.run_pipeline(config, tmp_path / "b", threads=1)
        first = io.read_json(tmp_path / "a" / io.MANIFEST_NAME)
        second = io.read_json(tmp_path / "b" / io.MANIFEST_NAME)
        assert first["files"] == second["files"]
        assert first["config_hash"] == second["config_hash"]

    def test_mixing_without_training(self, config, tmp_path):
        """The mixing stage only needs the kernel."""
        out = tmp_path / "study"
        pipeline.run_stage("simulate", config, out, threads=1)
        payload = pipeline.run_stage("mixing", config, out, threads=1)
        assert (out / "mixing.csv").is_file()
        assert (out / "mixing.svg").is_file()
        assert not (out / "train.json").exists()
        assert {line["name"] for line in payload["diagnostics"]} == {
            "polynomial-ergodicity",
            "dependent-blocks",
        }

    def test_renewal_mixing_passes(self, minimal_config, tmp_path):
        """kappa = 2 decays like t^-1 on [5, 80], matching its nominal exponent."""
        out = tmp_path / "study"
        config = parse_config(_renewal_mixing(minimal_config))
        pipeline.run_pipeline(config, out, threads=1, stages=["simulate", "mixing"])
        mixing = io.read_json(out / "mixing.json")
        assert mixing["geometric_regime"] is False
        assert 0.7 <= mixing["tv"]["fit"]["exponent"] <= 1.3
        assert mixing["tv"]["fit"]["r_squared"] >= 0.98
        assert _stage_verdicts(mixing)["polynomial-ergodicity"] == "PASS"

    @pytest.mark.parametrize(
        "override",
        [{"beta_nominal": 3.0}, {"min_r_squared": 1.0}],
    )
    def test_renewal_mixing_gate(self, minimal_config, tmp_path, override):
        """A decaying chain fails when its exponent or fit quality misses the target."""
        data = _renewal_mixing(minimal_config)
        data["diagnostics"].update(override)
        out = tmp_path / "study"
        pipeline.run_pipeline(parse_config(data), out, threads=1, stages=["simulate", "mixing"])
        assert _stage_verdicts(io.read_json(out / "mixing.json"))["polynomial-ergodicity"] == "FAIL"

    def test_stage_needs_inputs(self, config, tmp_path):
        """Stages fail with MissingArtifact when an input is absent."""
        with pytest.raises(MissingArtifact):
            pipeline.run_stage("train", config, tmp_path / "empty", threads=1)

    def test_report_on_empty_dir(self, tmp_path):
        """No stage output means nothing to report."""
        with pytest.raises(MissingArtifact):
            pipeline.build_report(tmp_path)

    def test_decompose_disabled(self, minimal_config, tmp_path):
        """With decompose off the stage is skipped and histories carry no stream."""
        data = json.loads(json.dumps(minimal_config))
        data["diagnostics"]["decompose"] = False
        out = tmp_path / "study"
        pipeline.run_pipeline(parse_config(data), out, threads=1, stages=["simulate", "train"])
        assert not (out / "decompose.json").exists()
        assert "state" not in io.read_csv(out / "histories" / "history_0000.csv").columns

    def test_relu_crossings(self, relu_config, tmp_path):
        """ReLU studies report the gradient bound and region crossings."""
        out = tmp_path / "study"
        report = pipeline.run_pipeline(relu_config, out, threads=1, stages=["simulate", "train", "crossings"])
        verdicts = _verdicts(report)
        assert verdicts["uniform-gradient-bound"] == Verdict.PASS
        assert verdicts["region-crossings"] in (Verdict.PASS, Verdict.FAIL)
        crossings = io.read_json(out / "crossings.json")
        assert crossings["max_gradient_norm"] <= crossings["G"]
        assert len(io.read_csv(out / "crossings.csv")) == 30
        assert io.read_json(out / "train.json")["fixed_point_method"] == "long-run-average"


class TestCli:
    """Tests for the tdmix command."""

    def test_run(self, config_file, tmp_path, capsys):
        """A full run exits 0 or 4 and prints one line per diagnostic."""
        code = cli.main(["run", "--config", str(config_file)])
        assert code in (cli.EXIT_OK, cli.EXIT_CHECK_FAILED)
        assert (tmp_path / "study" / io.MANIFEST_NAME).is_file()
        assert "lyapunov-drift: NA" in capsys.readouterr().out

    def test_single_stages(self, config_file, tmp_path):
        """Stage subcommands share the artifact directory."""
        out = tmp_path / "stages"
        assert cli.main(["simulate", "--config", str(config_file), "--out", str(out)]) == cli.EXIT_OK
        code = cli.main(["mixing", "--config", str(config_file), "--out", str(out)])
        assert code in (cli.EXIT_OK, cli.EXIT_CHECK_FAILED)
        assert (out / "mixing.json").is_file()

    def test_seed_override(self, config_file, tmp_path):
        """--seeds sets the number of training histories."""
        out = tmp_path / "seeded"
        cli.main(["simulate", "--config", str(config_file), "--out", str(out)])
        cli.main(["train", "--config", str(config_file), "--out", str(out), "--seeds", "3"])
        assert io.read_json(out / "train.json")["n_histories"] == 3

    def test_invalid_config(self, minimal_config, tmp_path):
        """Validation failures exit 2."""
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({**minimal_config, "schedule": {"eta": 0.3}}))
        assert cli.main(["run", "--config", str(path)]) == cli.EXIT_CONFIG

    def test_bad_seed_override(self, config_file):
        """--seeds must be positive."""
        assert cli.main(["train", "--config", str(config_file), "--seeds", "0"]) == cli.EXIT_CONFIG

    def test_report_without_artifacts(self, tmp_path):
        """Reporting on an empty directory exits 3."""
        assert cli.main(["report", "--out", str(tmp_path)]) == cli.EXIT_RUNTIME

    def test_report_needs_location(self):
        """report without --out or --config is a config error."""
        assert cli.main(["report"]) == cli.EXIT_CONFIG

    def test_report_after_run(self, config_file, tmp_path, capsys):
        """report re-reads the stage outputs of a finished run."""
        cli.main(["run", "--config", str(config_file)])
        capsys.readouterr()
        code = cli.main(["report", "--config", str(config_file)])
        assert code in (cli.EXIT_OK, cli.EXIT_CHECK_FAILED)
        assert "error-decomposition: PASS" in capsys.readouterr().out


def _bound_report(**overrides):
    fields = dict(
        variant=BoundVariant.LINEAR_HP,
        fitted={"C": 1.0, "Cp": 0.5},
        quantile_exponent=0.85,
        predicted_exponent=0.75,
        exponent_gap=0.1,
        domination=True,
        domination_batch_a=True,
        slack_min=0.01,
        variant_gaps={"linear-hp": 0.1, "relu-deep": 0.6, "geometric": 0.35},
        closest_variant="linear-hp",
    )
    fields.update(overrides)
    return BoundReport(**fields)


class TestRateVerdict:
    """Tests for the high-probability-bound verdict."""

    diagnostics = DiagnosticsConfig()

    def test_linear_within_tolerance(self):
        """Dominated and within 0.15 of the predicted exponent."""
        verdict, chosen, detail = pipeline.rate_verdict(_bound_report(), "linear", self.diagnostics)
        assert verdict == Verdict.PASS
        assert chosen == "linear-hp"
        assert "gap=0.100" in detail

    def test_linear_gap_too_large(self):
        """Domination alone is not enough when the exponent is off."""
        report = _bound_report(exponent_gap=-0.4, quantile_exponent=0.35)
        verdict, _, _ = pipeline.rate_verdict(report, "linear", self.diagnostics)
        assert verdict == Verdict.FAIL

    def test_held_out_violation(self):
        """An exceeded envelope fails even with a perfect exponent."""
        report = _bound_report(exponent_gap=0.0, domination=False)
        verdict, _, detail = pipeline.rate_verdict(report, "linear", self.diagnostics)
        assert verdict == Verdict.FAIL
        assert "held-out" in detail

    def test_relu_uses_closest_variant(self):
        """ReLU runs are judged against the best of the compared variants."""
        report = _bound_report(
            exponent_gap=0.6,
            variant_gaps={"linear-hp": 0.6, "relu-deep": 0.2, "geometric": 0.5},
            closest_variant="relu-deep",
        )
        verdict, chosen, _ = pipeline.rate_verdict(report, "relu", self.diagnostics)
        assert verdict == Verdict.PASS
        assert chosen == "relu-deep"
        assert pipeline.rate_verdict(report, "linear", self.diagnostics)[0] == Verdict.FAIL

    def test_relu_outside_tolerance(self):
        """Every compared variant more than 0.25 away fails."""
        report = _bound_report(
            variant_gaps={"linear-hp": 0.4, "relu-deep": 0.3, "geometric": 0.5},
            closest_variant="relu-deep",
        )
        assert pipeline.rate_verdict(report, "relu", self.diagnostics)[0] == Verdict.FAIL

    def test_no_exponent(self):
        """Without a fitted exponent the verdict is NA."""
        report = _bound_report(quantile_exponent=None, exponent_gap=None, variant_gaps={}, closest_variant=None)
        assert pipeline.rate_verdict(report, "linear", self.diagnostics)[0] == Verdict.NA

    def test_rates_stage_records_choice(self, minimal_config, tmp_path):
        """A rates run with an unreachable tolerance fails and names its variant."""
        data = json.loads(json.dumps(minimal_config))
        data["seeds"]["n_seeds"] = 40
        data["diagnostics"].update(delta=0.5, rate_tolerance_linear=1e-9)
        out = tmp_path / "study"
        pipeline.run_pipeline(parse_config(data), out, threads=1, stages=["simulate", "train", "rates"])
        rates_payload = io.read_json(out / "rates.json")
        assert rates_payload["chosen_variant"] == "linear-hp"
        assert _stage_verdicts(rates_payload)["high-probability-bound"] == "FAIL"
