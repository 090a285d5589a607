import json
import subprocess
import sys

import pytest

from dgt.cli import main
from dgt.ingest import write_price_csv
from dgt.synthetic import planted_panel

from pipeline_fixtures import config_doc, write_run


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_price_csv(planted_panel(n_days=300, seed=1), root / "prices.csv")
    assert main(["ingest", "--input", str(root / "prices.csv"), "--block-len", "32",
                 "--out", str(root / "panel.dgtp")]) == 0
    return root


def test_ingest_reports_split(files, capsys, tmp_path):
    assert main(["ingest", "--input", str(files / "prices.csv"), "--block-len", "32",
                 "--out", str(tmp_path / "p.dgtp")]) == 0
    assert "8 tickers x 300 days, 9 blocks (7/1/1)" in capsys.readouterr().out


def test_corr_train_eval_chain(files, capsys):
    p = str(files)
    assert main(["corr", "--panel", f"{p}/panel.dgtp", "--metric", "kendall", "--scope", "global",
                 "--heads", "2", "--out", f"{p}/g.dgtg"]) == 0
    args = ["train", "--panel", f"{p}/panel.dgtp", "--graphs", f"{p}/g.dgtg", "--arch", "dgt", "--spatial",
            "--metric", "kendall", "--scope", "global", "--epochs", "3", "--eval-every", "1", "--lr-grid",
            "0.01,0.1", "--d", "8", "--heads", "2", "--window-len", "16", "--log", f"{p}/log.csv",
            "--out", f"{p}/m.dgtc"]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "lr=0.01:" in out and "lr=0.1:" in out and "selected lr=" in out
    assert (files / "log.csv").read_text().splitlines()[0] == "epoch,train_loss,val_rmse,val_mae"
    assert main(["eval", "--ckpt", f"{p}/m.dgtc", "--panel", f"{p}/panel.dgtp", "--graphs", f"{p}/g.dgtg",
                 "--csv", f"{p}/r.csv", "--out", f"{p}/r.json"]) == 0
    doc = json.loads((files / "r.json").read_text())
    assert doc["rmse"] >= doc["mae"] and doc["units"] == "z"
    assert main(["eval", "--ckpt", f"{p}/m.dgtc", "--panel", f"{p}/panel.dgtp", "--graphs", f"{p}/g.dgtg",
                 "--currency", "--out", f"{p}/rc.json"]) == 0
    assert json.loads((files / "rc.json").read_text())["units"] == "currency"


def test_corr_top_and_cluster(files, capsys):
    p = str(files)
    assert main(["corr", "top", "--panel", f"{p}/panel.dgtp", "--ticker", "L0", "--k", "3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "rank,ticker,value" and len(lines) == 4
    # followers of leader 0 are F2, F4, F6
    assert {l.split(",")[1] for l in lines[1:]} == {"F2", "F4", "F6"}
    assert main(["cluster", "--panel", f"{p}/panel.dgtp", "--k", "2", "--scatter", f"{p}/s.csv"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "ticker,cluster"
    assert (files / "s.csv").read_text().splitlines()[0] == "ticker,pc1,pc2,cluster"
    assert main(["cluster", "scan", "--panel", f"{p}/panel.dgtp", "--k-range", "2..5"]) == 0
    captured = capsys.readouterr()
    assert len(captured.out.splitlines()) == 5 and "silhouette argmax" in captured.err


def test_error_exit_codes(files, tmp_path, capsys):
    p = str(files)
    assert main(["ingest", "--input", str(tmp_path / "absent.csv"), "--out", str(tmp_path / "x")]) == 3
    (tmp_path / "bad.csv").write_text("date,A\n2020-01-01,abc\n")
    assert main(["ingest", "--input", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "x")]) == 3
    assert main(["train", "--panel", f"{p}/panel.dgtp", "--spatial", "--metric", "kendall", "--scope", "global",
                 "--d", "8", "--heads", "2", "--epochs", "1", "--out", str(tmp_path / "m")]) == 2
    assert main(["train", "--panel", f"{p}/panel.dgtp", "--arch", "gru", "--spatial", "--out",
                 str(tmp_path / "m")]) == 2
    (tmp_path / "junk.dgtc").write_bytes(b"DGTC" + b"\0" * 40)
    assert main(["eval", "--ckpt", str(tmp_path / "junk.dgtc"), "--panel", f"{p}/panel.dgtp",
                 "--out", str(tmp_path / "r.json")]) == 3
    assert "dgt: error:" in capsys.readouterr().err


def test_config_validate_and_pipeline(tmp_path, capsys, monkeypatch):
    cfg = write_run(tmp_path)
    assert main(["config", "validate", str(cfg)]) == 0
    assert json.loads(capsys.readouterr().out)["train"]["d"] == 8
    doc = config_doc()
    doc["grid"].append({"architecture": "dgt", "use_spatial": False, "correlation": "kendall", "scope": "global"})
    bad = write_run(tmp_path, doc, name="bad.yaml")
    assert main(["config", "validate", str(bad)]) == 2
    assert main(["pipeline", str(bad)]) == 2
    monkeypatch.setenv("DGT_SEED", "3")
    assert main(["pipeline", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert out.count("RMSE") == 3
    digest_doc = json.loads((tmp_path / "work" / "manifest.json").read_text())
    assert digest_doc["stages"]["ingest"]["status"] == "done"


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dgt.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("ingest", "corr", "train", "eval", "cluster", "pipeline", "config"):
        assert cmd in proc.stdout


def test_bad_argument_values_are_usage_errors(files, capsys):
    p = str(files)
    assert main(["corr", "top", "--panel", f"{p}/panel.dgtp", "--ticker", "NOPE"]) == 2
    assert main(["corr", "top", "--panel", f"{p}/panel.dgtp", "--ticker", "L0", "--k", "99"]) == 2
    assert main(["ingest", "--input", f"{p}/prices.csv", "--block-len", "1", "--out", f"{p}/x.dgtp"]) == 2
    assert capsys.readouterr().err.count("dgt: error:") == 3
    (files / "junk.dgtg").write_bytes(b"nope")
    assert main(["train", "--panel", f"{p}/panel.dgtp", "--graphs", f"{p}/junk.dgtg", "--spatial", "--metric",
                 "kendall", "--scope", "global", "--out", f"{p}/m2.dgtc"]) == 3
