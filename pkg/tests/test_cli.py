import configparser
import json
import subprocess
import sys

import pytest

from specbeam.cli import main


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    w, t = str(d / "w.json"), str(d / "t.json")
    assert main(["gen-world", "--items", "30", "--users", "80", "--codebook", "4,4,4", "--out", w]) == 0
    assert main(["train", "--role", "target", "--world", w, "--epochs", "20", "--out", t]) == 0
    dr = str(d / "d.json")
    assert main(["train", "--role", "draft", "--world", w, "--target", t, "--warm-epochs", "5", "--epochs", "5",
                 "--out", dr]) == 0
    return d, w, t, dr


def test_gen_world_defaults_and_determinism(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["gen-world", "--out", str(a)]) == 0
    assert main(["gen-world", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    d = json.loads(a.read_text())
    assert len(d["items"]) == 200 and d["codebook"] == [16, 16, 16, 16]
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read(str(a) + ".ini")
    assert cp.get("world", "items") == "200" and cp.get("run", "seed") == "0"


def test_gen_world_infeasible_is_usage_error(tmp_path):
    assert main(["gen-world", "--items", "100", "--codebook", "3,3", "--out", str(tmp_path / "x.json")]) == 2


def test_usage_errors(tmp_path, files):
    d, w, t, dr = files
    assert main([]) == 2
    assert main(["bogus"]) == 2
    assert main(["train", "--role", "target", "--world", str(tmp_path / "missing.json"), "--out", "x"]) == 2
    assert main(["decode", "--world", w, "--target", t, "--draft", dr, "--K", "5", "--N", "2"]) == 2
    assert main(["check", "--suite", "nope"]) == 2
    assert main(["gen-world", "--out", str(tmp_path / "w.json"), "--config", str(tmp_path / "none.ini")]) == 2


def test_sft_equals_aligned_variant_with_zero_alpha(files):
    d, w, t, _ = files
    a, b = str(d / "sft.json"), str(d / "s0.json")
    common = ["train", "--role", "draft", "--world", w, "--target", t, "--warm-epochs", "3", "--epochs", "3"]
    assert main(common + ["--variant", "sft", "--out", a]) == 0
    assert main(common + ["--variant", "atspeed-s", "--alpha", "0", "--out", b]) == 0
    assert open(a, "rb").read() == open(b, "rb").read()


def test_train_curve_and_dataset_outputs(files):
    d, w, t, _ = files
    curve, ds = d / "curve.csv", d / "ds.jsonl"
    assert main(["train", "--role", "draft", "--world", w, "--target", t, "--variant", "atspeed-r", "--alpha", "0.5",
                 "--warm-epochs", "2", "--epochs", "3", "--curve-out", str(curve), "--dataset-out", str(ds),
                 "--out", str(d / "r.json")]) == 0
    lines = curve.read_text().splitlines()
    assert lines[0] == "epoch,rec_loss,align_loss,total_loss" and len(lines) == 1 + 6
    rec = json.loads(ds.read_text().splitlines()[0])
    assert rec["source"] == "target_topk" and "context" in rec["x"]


def test_decode_trace_and_lossless(files, capsys):
    d, w, t, dr = files
    trace = d / "trace.jsonl"
    assert main(["decode", "--world", w, "--target", t, "--draft", dr, "--K", "3", "--N", "5", "--users", "test",
                 "--assert-lossless", "--trace-out", str(trace)]) == 0
    rows = [json.loads(x) for x in trace.read_text().splitlines()]
    assert len(rows) == 20 and rows[0]["K"] == 3
    assert "AS=" in capsys.readouterr().out
    assert main(["decode", "--world", w, "--target", t, "--draft", dr, "--verification", "relaxed",
                 "--assert-lossless", "--users", "0"]) == 2


def test_decode_relaxed_is_seeded(files):
    d, w, t, dr = files
    outs = []
    for name in ("r1", "r2"):
        p = d / f"{name}.jsonl"
        assert main(["decode", "--world", w, "--target", t, "--draft", dr, "--verification", "relaxed", "--K", "3",
                     "--N", "3", "--users", "0,1,2", "--seed", "4", "--alg2-literal", "--trace-out", str(p)]) == 0
        outs.append(p.read_text())
    assert outs[0] == outs[1]


def test_bench_writes_json_csv_and_ini(files, capsys):
    d, w, t, dr = files
    out = d / "bench.json"
    assert main(["bench", "--world", w, "--target", t, "--methods", f"sft={dr}", "--K", "1,3", "--N", "5",
                 "--verification", "strict", "--users", "10", "--report-out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert len(rep["rows"]) == 2 and rep["config"]["users"] == 10
    assert (d / "bench.csv").read_text().startswith("method,verification,K,N,gamma,alpha,AS,WS,recall")
    assert (d / "bench.json.ini").exists()
    assert main(["bench", "--world", w, "--target", t, "--methods", "broken", "--report-out", str(out)]) == 2


def test_config_precedence(files, tmp_path, monkeypatch):
    d, w, t, dr = files
    ini = tmp_path / "c.ini"
    ini.write_text("[sd]\nK = 2\nN = 4\n[run]\nseed = 9\n")
    trace = tmp_path / "t.jsonl"
    monkeypatch.setenv("SPECBEAM_SEED", "5")
    assert main(["decode", "--world", w, "--target", t, "--draft", dr, "--config", str(ini), "--N", "6",
                 "--users", "0", "--trace-out", str(trace)]) == 0
    used = configparser.ConfigParser()
    used.optionxform = str
    used.read(str(trace) + ".ini")
    assert used.get("sd", "K") == "2"  # config file
    assert used.get("sd", "N") == "6"  # flag beats config
    assert used.get("run", "seed") == "9"  # config beats environment
    assert used.get("sd", "gamma") == "4"  # default
    ini.write_text("[sd]\nK = 2\n")
    assert main(["decode", "--world", w, "--target", t, "--draft", dr, "--config", str(ini), "--users", "0",
                 "--trace-out", str(trace)]) == 0
    used.read(str(trace) + ".ini")
    assert used.get("run", "seed") == "5"  # environment beats default


def test_check_suites(tmp_path, capsys):
    out = tmp_path / "rep.json"
    assert main(["check", "--suite", "exactness", "--report-out", str(out)]) == 0
    assert "max_err=" in capsys.readouterr().out
    rep = json.loads(out.read_text())
    assert rep[0]["pass"] is True and rep[0]["max_abs_error"] < 1e-9
    for suite in ("tree", "replacement"):
        assert main(["check", "--suite", suite]) == 0


@pytest.mark.slow
def test_check_all_passes():
    assert main(["check"]) == 0


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "specbeam", "gen-world", "--items", "5", "--codebook", "3,3",
                        "--users", "4", "--out", str(tmp_path / "w.json")], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "specbeam", "decode"], capture_output=True, text=True)
    assert r.returncode == 2
