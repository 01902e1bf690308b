import asyncio
import json

import pytest

from decision_layer.errors import ConfigurationError, ExperimentError, PreconditionError
from decision_layer.harness import (
    OUTPUT_DIR_ENV,
    ReportTable,
    _schedule,
    config_from_dict,
    emit_report,
    infer_experiment,
    load_config,
    output_dir_for,
    run_experiment,
)
from decision_layer.trace_log import read_traces

SMALL_RETRIEVAL = {"counts": [2, 2, 2], "corpus_seed": 1}


class TestConfig:
    def test_defaults(self):
        config = config_from_dict({"experiment": "calendar"})
        assert config.method == "dc"
        assert config.runs == 10 and config.base_seed == 0 and config.workers == 1
        assert config.calendar.T == 6
        assert len(config.calendar.scenarios) == 8
        assert config_from_dict({"experiment": "retrieval"}).method == "dc_composite"

    def test_out_of_range_tau_names_field(self):
        with pytest.raises(ConfigurationError) as err:
            config_from_dict({"experiment": "retrieval", "retrieval": {"tau": 1.5}})
        assert "tau" in err.value.field_path

    def test_method_must_fit_experiment(self):
        with pytest.raises(ConfigurationError) as err:
            config_from_dict({"experiment": "graph", "method": "dc_llm"})
        assert err.value.field_path == "method"

    def test_unknown_scenario_rejected(self):
        with pytest.raises(ConfigurationError):
            config_from_dict({"experiment": "calendar", "calendar": {"scenarios": ["k9"]}})

    def test_small_graph_rejected(self):
        with pytest.raises(ConfigurationError) as err:
            config_from_dict({"experiment": "graph", "graph": {"n": 20}})
        assert err.value.field_path == "graph.n"

    def test_overrides_win_and_none_is_skipped(self):
        config = config_from_dict(
            {"experiment": "retrieval", "retrieval": {"tau": 0.6}},
            {"retrieval.tau": 0.9, "retrieval.alpha": None, "runs": 3},
        )
        assert config.retrieval.tau == 0.9
        assert config.retrieval.alpha == 0.4
        assert config.runs == 3

    def test_load_config_errors(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(str(tmp_path / "missing.json"))
        broken = tmp_path / "broken.json"
        broken.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigurationError):
            load_config(str(broken))

    def test_output_dir_env_override(self, monkeypatch, tmp_path):
        config = config_from_dict({"experiment": "calendar", "output_dir": "elsewhere"})
        assert output_dir_for(config) == "elsewhere"
        monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path))
        assert output_dir_for(config) == str(tmp_path)


class TestReport:
    table = ReportTable(
        caption="Demo",
        columns=("Row", "Succ.", "RR", "n"),
        rows=(("a", (0.875, 1.6249, 7)), ("b", (None, 0.0, 0))),
        formats=("percent", "rate", "int"),
    )

    def test_markdown_is_byte_stable(self):
        expected = (
            "Table: Demo\n"
            "\n"
            "| Row | Succ. | RR | n |\n"
            "|---|---|---|---|\n"
            "| a | 88% | 1.62 | 7 |\n"
            "| b | - | 0.00 | 0 |\n"
        )
        assert emit_report(self.table) == expected
        assert emit_report(self.table) == emit_report(self.table)

    def test_csv(self):
        assert emit_report(self.table, "csv") == "Row,Succ.,RR,n\na,88%,1.62,7\nb,-,0.00,0\n"

    def test_empty_table_keeps_header(self):
        empty = ReportTable(caption="Empty", columns=("Bucket", "n"), formats=("int",))
        assert emit_report(empty, "csv") == "Bucket,n\n"
        assert emit_report(empty).endswith("|---|---|\n")

    def test_row_arity_checked(self):
        with pytest.raises(PreconditionError):
            ReportTable(caption="x", columns=("a", "b"), rows=(("r", (1, 2)),))

    def test_unknown_format(self):
        with pytest.raises(ConfigurationError):
            emit_report(self.table, "html")


class TestRunExperiment:
    def test_calendar_table_has_eight_rows(self):
        config = config_from_dict({"experiment": "calendar", "runs": 2})
        result = run_experiment(config, write=False)
        table = result.data["table"]
        assert [label for label, _ in table.rows] == [
            "k0", "k1-absent", "k1-unresolvable", "k2-absent", "k2-unresolvable",
            "k3-absent", "k3-unresolvable", "k4",
        ]
        assert result.metadata["episodes"] == 16
        assert result.metadata["success_rate"] == 1.0
        assert "| k0 | 0 | 100% | 100% | 0.00 | 0.00 | 1.00 |" in emit_report(table)

    def test_graph_table_has_five_rows(self):
        config = config_from_dict({"experiment": "graph", "runs": 1, "graph": {"n": 60}})
        table = run_experiment(config, write=False).data["table"]
        assert [label for label, _ in table.rows] == ["S1", "S2", "S3", "S4", "S5"]
        assert all(values[0] == 1.0 for _, values in table.rows)

    def test_retrieval_table_has_three_buckets(self):
        config = config_from_dict({"experiment": "retrieval", "runs": 1, "retrieval": SMALL_RETRIEVAL})
        table = run_experiment(config, write=False).data["table"]
        assert [label for label, _ in table.rows] == ["easy", "medium", "hard"]
        assert [values[0] for _, values in table.rows] == [2.0, 2.0, 2.0]

    def test_outputs_written(self, tmp_path):
        config = config_from_dict({"experiment": "calendar", "runs": 1, "output_dir": str(tmp_path)})
        result = run_experiment(config)
        assert result.metadata["trace_path"] == str(tmp_path / "traces" / "calendar_dc.jsonl")
        assert len(read_traces(result.metadata["trace_path"])) == 8
        markdown = (tmp_path / "calendar_dc.md").read_text(encoding="utf-8")
        assert markdown.startswith("Table: Calendar results by scenario (dc)")
        assert (tmp_path / "calendar_dc.csv").read_text(encoding="utf-8").startswith("Scenario,k,Succ.")

    def test_results_do_not_depend_on_workers(self):
        doc = {"experiment": "graph", "method": "retry", "runs": 6, "base_seed": 11, "graph": {"n": 60}}
        serial = run_experiment(config_from_dict(doc), write=False).data["traces"]
        parallel = run_experiment(config_from_dict({**doc, "workers": 4}), write=False).data["traces"]
        assert [t.to_lines() for t in serial] == [t.to_lines() for t in parallel]
        assert [t.seed for t in serial[::5]] == [11, 12, 13, 14, 15, 16]

    def test_failing_run_carries_index(self):
        def run(run_index, seed):
            if run_index == 2:
                raise PreconditionError("boom")
            return []

        with pytest.raises(ExperimentError) as err:
            asyncio.run(_schedule(run, runs=4, base_seed=0, workers=2))
        assert err.value.run_index == 2


def test_infer_experiment():
    calendar = run_experiment(config_from_dict({"experiment": "calendar", "runs": 1}), write=False).data["traces"]
    assert infer_experiment(calendar) == "calendar"
    with pytest.raises(PreconditionError):
        infer_experiment([])


def test_config_file_roundtrip(tmp_path):
    path = tmp_path / "graph.json"
    path.write_text(json.dumps({"experiment": "graph", "graph": {"tau_suff": 0.5}}), encoding="utf-8")
    config = load_config(str(path), {"runs": 2})
    assert config.graph.tau_suff == 0.5 and config.runs == 2
