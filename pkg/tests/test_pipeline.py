import json

import pytest

from dgt.pipeline import (
    COMPARISON_COLUMNS, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_EVAL, LEADERBOARD_COLUMNS, ConfigError,
    GridRow, Manifest, emit_report, exit_code_for, load_run_config, parse_run_config, run_pipeline,
)
from dgt.cluster import ClusterError
from dgt.corr import CorrelationError
from dgt.evaluate import EvaluationError
from dgt.ingest import DataError
from dgt.train import CheckpointError, TrainingDiverged

from pipeline_fixtures import config_doc, write_run

ENV: dict = {}


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = load_run_config(write_run(root), env=ENV)
    result = run_pipeline(cfg, env=ENV)
    return cfg, result


def test_pipeline_produces_every_artifact(finished):
    cfg, result = finished
    assert result.exit_code == 0 and result.failures == {}
    w = cfg.workdir
    for rel in ("panel.dgtp", "graphs/kendall-global.dgtg", "leaderboard.csv", "leaderboard.json",
                "plots/top_L0_kendall.csv", "plots/trace_L0_kendall.csv", "cluster/clusters.csv",
                "cluster/scan.csv", "cluster/scatter.csv", "cluster/summary.json", "cluster/comparison.csv"):
        assert (w / rel).is_file(), rel
    for row in cfg.grid:
        for f in ("checkpoint.dgtc", "log.csv", "grid.json", "report.json", "report.csv"):
            assert (w / "runs" / row.label / f).is_file()
    assert [r["rmse"] for r in result.leaderboard] == sorted((r["rmse"] for r in result.leaderboard), reverse=True)
    assert len(result.leaderboard) == 3
    assert all(r["rmse"] >= r["mae"] for r in result.leaderboard)
    header = (w / "cluster/comparison.csv").read_text().splitlines()[0]
    assert header == ",".join(COMPARISON_COLUMNS)
    assert (w / "leaderboard.csv").read_text().splitlines()[0] == ",".join(LEADERBOARD_COLUMNS)


def test_rerun_skips_finished_stages(finished, caplog):
    cfg, first = finished
    before = (cfg.workdir / "runs" / cfg.grid[0].label / "checkpoint.dgtc").stat().st_mtime_ns
    with caplog.at_level("INFO", logger="dgt.pipeline"):
        again = run_pipeline(cfg, env=ENV)
    assert again.exit_code == 0 and again.leaderboard == first.leaderboard
    skipped = [r.getMessage() for r in caplog.records if "already complete" in r.getMessage()]
    assert len(skipped) == 1 + 1 + 2 * len(cfg.grid)
    assert (cfg.workdir / "runs" / cfg.grid[0].label / "checkpoint.dgtc").stat().st_mtime_ns == before


def test_workdir_from_a_different_config_is_rejected(finished):
    cfg, _ = finished
    doc = config_doc(epochs=6)
    changed = parse_run_config(doc, cfg.input_csv.parent, env=ENV)
    with pytest.raises(ConfigError, match="different configuration"):
        run_pipeline(changed, env=ENV)


def test_failed_stage_sets_exit_code_and_retries(tmp_path):
    doc = config_doc()
    cfg = load_run_config(write_run(tmp_path, doc), env=ENV)
    cfg.input_csv.write_text("date,A\n2020-01-01,oops\n")
    result = run_pipeline(cfg, env=ENV)
    assert result.exit_code == EXIT_DATA and "ingest" in result.failures
    manifest = json.loads((cfg.workdir / "manifest.json").read_text())
    assert manifest["stages"]["ingest"]["status"] == "failed"


def test_threaded_run_matches_sequential(tmp_path, finished):
    cfg_seq, seq = finished
    cfg = load_run_config(write_run(tmp_path), env={"DGT_THREADS": "3"})
    par = run_pipeline(cfg, env={"DGT_THREADS": "3"})
    assert par.leaderboard == seq.leaderboard
    for row in cfg.grid:
        a = (cfg.workdir / "runs" / row.label / "checkpoint.dgtc").read_bytes()
        assert a == (cfg_seq.workdir / "runs" / row.label / "checkpoint.dgtc").read_bytes()


def test_bad_thread_count_is_a_config_error(tmp_path):
    cfg = load_run_config(write_run(tmp_path), env=ENV)
    with pytest.raises(ConfigError, match="DGT_THREADS"):
        run_pipeline(cfg, env={"DGT_THREADS": "0"})


# ---------------------------------------------------------------- config parsing


def _parse(tmp_path, mutate, env=ENV):
    doc = config_doc()
    mutate(doc)
    return parse_run_config(doc, write_run(tmp_path).parent, env=env)


@pytest.mark.parametrize("mutate,match", [
    (lambda d: d["grid"].append({"architecture": "dgt", "use_spatial": False, "correlation": "kendall",
                                 "scope": "global"}), "requires use_spatial"),
    (lambda d: d["grid"].append({"architecture": "gru", "use_spatial": True}), "GRU"),
    (lambda d: d["grid"].append({"architecture": "lstm"}), "architecture"),
    (lambda d: d["grid"].append({"architecture": "dgt", "use_spatial": True, "correlation": "kendall"}),
     "needs a scope"),
    (lambda d: d["grid"].append({"architecture": "dgt", "use_spatial": "yes"}), "true or false"),
    (lambda d: d["grid"].append(dict(d["grid"][0])), "duplicate"),
    (lambda d: d.update(grid=[]), "non-empty"),
    (lambda d: d.update(extra=1), "unknown top-level"),
    (lambda d: d["train"].update(momentum=0.5), "unknown key"),
    (lambda d: d["train"].update(lr_grid=[]), "lr_grid"),
    (lambda d: d["train"].update(epochs=1, eval_every=2), "eval_every"),
    (lambda d: d["train"].update(window_len=64), "exceeds block_len"),
    (lambda d: d["ingest"].update(ratios=[0.5, 0.5, 0.5]), "ratios"),
    (lambda d: d["cluster"].update(k_range=[1, 4]), "k_range"),
    (lambda d: d["cluster"].update(test="ks"), "cluster.test"),
    (lambda d: d["paths"].pop("workdir"), "required"),
    (lambda d: d["paths"].update(input="missing.csv"), "not found"),
])
def test_config_errors(tmp_path, mutate, match):
    with pytest.raises(ConfigError, match=match):
        _parse(tmp_path, mutate)


def test_seed_override_and_path_resolution(tmp_path):
    cfg = _parse(tmp_path, lambda d: None, env={"DGT_SEED": "11"})
    assert cfg.train.seed == 11 and cfg.cluster_seed == 11
    assert cfg.workdir == (tmp_path / "work").resolve()
    with pytest.raises(ConfigError, match="DGT_SEED"):
        _parse(tmp_path, lambda d: None, env={"DGT_SEED": "x"})
    base = _parse(tmp_path, lambda d: None)
    moved = _parse(tmp_path, lambda d: d["paths"].update(workdir="elsewhere"))
    assert base.digest() == moved.digest() != cfg.digest()


def test_invalid_yaml_is_a_config_error(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("grid: [unclosed\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_run_config(bad)
    with pytest.raises(ConfigError, match="cannot read"):
        load_run_config(tmp_path / "absent.yaml")


def test_grid_row_labels():
    assert GridRow("dgt", True, "kendall", "global").label == "dgt-spatial-kendall-global"
    assert GridRow("gru", False).label == "gru-plain-none-none"


# ---------------------------------------------------------------- reports / manifest


ROWS = [
    {"architecture": "GRU", "use_spatial": False, "correlation": "none", "scope": "none", "rmse": 0.5, "mae": 0.4},
    {"architecture": "DGT", "use_spatial": True, "correlation": "kendall", "scope": "global",
     "rmse": 0.3, "mae": 0.25},
    {"architecture": "DGT", "use_spatial": False, "correlation": "none", "scope": "none", "rmse": 0.55, "mae": 0.41},
]


def test_emit_report_csv_and_json_agree_and_sort_descending(tmp_path):
    csv_text = emit_report(ROWS, tmp_path / "lb.csv").read_text()
    doc = json.loads(emit_report(ROWS, tmp_path / "lb.json").read_text())
    lines = csv_text.splitlines()
    assert lines[0] == "architecture,use_spatial,correlation,scope,rmse,mae"
    assert [float(l.split(",")[4]) for l in lines[1:]] == [0.55, 0.5, 0.3]
    assert [r["rmse"] for r in doc["rows"]] == [0.55, 0.5, 0.3]
    assert doc["columns"] == list(LEADERBOARD_COLUMNS)
    assert lines[1:] == [",".join("True" if v is True else "False" if v is False else str(v)
                                  for v in (r[c] for c in LEADERBOARD_COLUMNS)) for r in doc["rows"]]


def test_emit_report_empty_and_bad_format(tmp_path):
    assert emit_report([], tmp_path / "e.csv").read_text() == ",".join(LEADERBOARD_COLUMNS) + "\n"
    with pytest.raises(ValueError):
        emit_report(ROWS, tmp_path / "lb.txt")


def test_manifest_round_trip(tmp_path):
    m = Manifest(tmp_path / "manifest.json", "abc")
    m.mark("ingest", "done", ["b", "a"])
    m.mark("train:x", "failed", error="boom", exit_code=4)
    again = Manifest(tmp_path / "manifest.json", "abc")
    assert again.done("ingest") and not again.done("train:x")
    assert again.stages["ingest"]["files"] == ["a", "b"]
    assert again.failures() == {"train:x": {"status": "failed", "files": [], "error": "boom", "exit_code": 4}}
    with pytest.raises(ConfigError):
        Manifest(tmp_path / "manifest.json", "other")


def test_exit_codes():
    assert exit_code_for(ConfigError("x")) == EXIT_CONFIG == 2
    assert exit_code_for(DataError("x")) == EXIT_DATA == 3
    assert exit_code_for(CorrelationError("x")) == 3
    assert exit_code_for(FileNotFoundError("x")) == 3
    assert exit_code_for(CheckpointError("x")) == 3
    assert exit_code_for(TrainingDiverged(2)) == EXIT_DIVERGED == 4
    assert exit_code_for(EvaluationError("x")) == EXIT_EVAL == 5
    assert exit_code_for(ClusterError("x")) == 5
    assert exit_code_for(RuntimeError("x")) == 1
