import json
import subprocess
import sys

import pytest

from paradec.aup import parse_curve
from paradec.cli import EXIT_DATA, EXIT_INTERNAL, EXIT_USAGE, exit_code_for, main, parse_taus
from paradec.denoisers import ContractViolation, DenoiserError
from paradec.engine import ConfigError, EngineError
from paradec.harness import PipelineError, TaskError
from profiles import EXPERIMENT


@pytest.fixture
def work(tmp_path):
    (tmp_path / "oracle.json").write_text(json.dumps(EXPERIMENT))
    (tmp_path / "engine.json").write_text(json.dumps({"block_size": 8, "max_len": 24}))
    assert main(["corpus", "gen", "--seed", "1", "--vocab", "12", "--sequences", "12",
                 "--len", "20", "--prompt-len", "4", "--out", str(tmp_path / "corpus.json")]) == 0
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


def test_aup_compute(tmp_path, capsys):
    (tmp_path / "c.csv").write_text("rho,acc\n1,80\n2,78\n3,70\n")
    assert run("aup", "compute", "--curve", tmp_path / "c.csv", "--alpha", 3, "--alphas", "1,3") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["score"] == pytest.approx(156.18, abs=0.01)
    assert [a for a, _ in out["alpha_sweep"]] == [1.0, 3.0]


def test_aup_bad_csv_is_data_error(tmp_path, capsys):
    (tmp_path / "c.csv").write_text("rho,acc\n1,abc\n")
    assert run("aup", "compute", "--curve", tmp_path / "c.csv") == EXIT_DATA
    assert "line 2" in capsys.readouterr().err


def test_aup_bad_alpha_is_usage_error(tmp_path):
    (tmp_path / "c.csv").write_text("rho,acc\n1,80\n")
    assert run("aup", "compute", "--curve", tmp_path / "c.csv", "--alpha", 0) == EXIT_USAGE


def test_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(["decode", "run", "--mode", "turbo"]) == EXIT_USAGE
    assert main(["--help"]) == 0


def test_full_chain(work, capsys):
    c, e, o = work / "corpus.json", work / "engine.json", work / "oracle.json"
    assert run("ngram", "train", "--corpus", c, "--order", 2, "--out", work / "ng.json") == 0
    assert run("traj", "record", "--model", f"oracle:{o}", "--tasks", c, "--len", 24,
               "--block-size", 8, "--out", work / "traj.jsonl") == 0
    assert run("distill", "build", "--traj", work / "traj.jsonl", "--records", 4,
               "--k-start", 4, "--k-end", 8, "--out", work / "rec.jsonl") == 0
    recs = [json.loads(x) for x in (work / "rec.jsonl").read_text().splitlines()]
    assert len(recs) == 48 and all(-1 in r["noisy"] for r in recs)
    assert run("policy", "fit", "--records", work / "rec.jsonl", "--out", work / "pol.json") == 0

    for spec in (f"oracle:{o}", f"ngram:{work / 'ng.json'}", f"policy:oracle:{o}+{work / 'pol.json'}"):
        assert run("decode", "run", "--model", spec, "--tasks", c, "--config", e,
                   "--tau", 0.5, "--out", work / "dec.json") == 0
        rep = json.loads((work / "dec.json").read_text())
        assert len(rep["tasks"]) == 12 and rep["config"]["tau"] == 0.5

    assert run("decode", "run", "--model", f"oracle:{o}", "--tasks", c, "--config", e,
               "--mode", "vanilla", "--out", work / "van.json") == 0
    assert json.loads((work / "van.json").read_text())["mean_tpf"] == 1.0

    capsys.readouterr()
    assert run("sweep", "--model", f"oracle:{o}", "--tasks", c, "--config", e, "--taus", "0:1:0.5",
               "--out-curve", work / "curve.csv", "--out-svg", work / "curve.svg",
               "--out-report", work / "sweep.json") == 0
    printed = json.loads(capsys.readouterr().out)
    assert len(parse_curve((work / "curve.csv").read_text())) == 3 == printed["points"]
    assert (work / "curve.svg").read_text().startswith("<svg")

    assert run("ablate", "--model", f"oracle:{o}", "--tasks", c, "--config", e, "--out", work / "ab.json") == 0
    assert len(json.loads((work / "ab.json").read_text())["cells"]) == 12


def test_missing_file_is_data_error(work):
    assert run("decode", "run", "--model", f"oracle:{work / 'oracle.json'}", "--tasks",
               work / "nope.json", "--out", work / "x.json") == EXIT_DATA


def test_bad_engine_config_is_usage_error(work):
    (work / "bad.json").write_text(json.dumps({"block_size": 0}))
    assert run("decode", "run", "--model", f"oracle:{work / 'oracle.json'}", "--tasks",
               work / "corpus.json", "--config", work / "bad.json", "--out", work / "x.json") == EXIT_USAGE


def test_bad_taus_is_usage_error(work):
    assert run("sweep", "--model", f"oracle:{work / 'oracle.json'}", "--tasks", work / "corpus.json",
               "--taus", "1:0:0.1", "--out-curve", work / "c.csv") == EXIT_USAGE


def test_incomplete_script_is_data_error(work):
    doc = json.loads((work / "corpus.json").read_text())
    (work / "script.json").write_text(json.dumps({"vocab": doc["vocab"], "positions": {"1": [3, 0.0]}}))
    assert run("decode", "run", "--model", f"scripted:{work / 'script.json'}", "--tasks",
               work / "corpus.json", "--config", work / "engine.json", "--out", work / "x.json") == EXIT_DATA


def test_pipeline(tmp_path, capsys):
    cfg = {
        "seed": 0, "output_dir": "out",
        "corpus": {"generate": {"vocab_size": 12, "sequences": 16, "length": 16, "prompt_len": 2}},
        "model": {"kind": "oracle", "params": EXPERIMENT},
        "distill": {"records_per_pair": 3},
        "engine": {"block_size": 8, "max_len": 24},
        "sweep": {"taus": [0, 0.5]},
    }
    (tmp_path / "p.json").write_text(json.dumps(cfg))
    assert run("pipeline", "run", "--config", tmp_path / "p.json") == 0
    assert set(json.loads(capsys.readouterr().out)["aup"]) == {"base", "policy", "policy_shuffled"}
    (tmp_path / "q.json").write_text(json.dumps({**cfg, "corpus": {"file": "missing.json"}}))
    assert run("pipeline", "run", "--config", tmp_path / "q.json") == EXIT_DATA
    assert "stage 'corpus'" in capsys.readouterr().err


@pytest.mark.parametrize("exc,code", [
    (ConfigError("x"), EXIT_USAGE),
    (TaskError("x"), EXIT_DATA),
    (FileNotFoundError("x"), EXIT_DATA),
    (EngineError("pass 3 decoded nothing"), EXIT_INTERNAL),
    (ContractViolation("x"), EXIT_INTERNAL),
    (RuntimeError("x"), EXIT_INTERNAL),
])
def test_exit_code_mapping(exc, code):
    assert exit_code_for(exc) == code


def test_exit_code_follows_cause():
    try:
        try:
            raise DenoiserError("bad row")
        except DenoiserError as inner:
            raise EngineError("pass 1: bad row") from inner
    except EngineError as outer:
        assert exit_code_for(outer) == EXIT_DATA
    wrapped = PipelineError("model", "x")
    wrapped.__cause__ = ConfigError("x")
    assert exit_code_for(wrapped) == EXIT_USAGE


def test_parse_taus():
    assert parse_taus("0:1:0.25") == [0, 0.25, 0.5, 0.75, 1.0]
    assert parse_taus("0.1,0.4") == [0.1, 0.4]
    assert parse_taus("0:0.3:0.1") == [0, 0.1, 0.2, 0.3]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "paradec", "aup", "compute"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE and "--curve" in proc.stderr
