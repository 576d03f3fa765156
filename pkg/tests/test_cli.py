import json
from pathlib import Path

import pytest

from ihalab.cli import compare_golden, main

GOLDEN = Path(__file__).parent / "golden"


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr()


def test_verify_polyfilter(capsys):
    code, out = run(capsys, "verify", "--suite", "polyfilter", "--N", "16", "--d", "3", "--k", "4")
    assert code == 0
    reports = json.loads(out.out)
    assert all(r["max_abs_error"] <= 1e-9 for r in reports)


def test_verify_cpm3_matches_golden(capsys):
    code, out = run(capsys, "verify", "--suite", "cpm3", "--nmax", "4", "--golden", str(GOLDEN / "verify_cpm3_n4.json"))
    assert code == 0, out.err
    ws = json.loads(out.out)[0]["details"]["workspace_example"]
    assert ws == [[1, 2, 3, 4], [2, 3, 4, 1], [3, 4, 1, 2], [4, 1, 2, 3]]


def test_verify_superset(capsys):
    code, out = run(capsys, "verify", "--suite", "superset", "--H", "2", "--d", "2", "--P", "3")
    assert code == 0
    reports = json.loads(out.out)
    assert reports[0]["max_abs_error"] <= 1e-10
    assert reports[-1]["details"]["witness_nonlinear"]


def test_golden_mismatch_fails(capsys, tmp_path):
    bad = json.loads((GOLDEN / "verify_cpm3_n4.json").read_text())
    bad[0]["param_count_constructed"] += 1
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(bad))
    code, _ = run(capsys, "verify", "--suite", "cpm3", "--nmax", "4", "--golden", str(p))
    assert code == 1


def test_compare_golden_tolerance():
    assert compare_golden({"a": [1.0]}, {"a": [1.0 + 1e-15]}) == []
    assert compare_golden({"a": [1.0]}, {"a": [1.0 + 1e-9]})


def test_gen_writes_three_splits(tmp_path, capsys):
    code, _ = run(capsys, "gen", "--task", "binary", "--preset", "desk", "--seed", "7", "--out", str(tmp_path))
    assert code == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["manifest.json", "test.jsonl", "train.jsonl", "val.jsonl"]
    assert sum(1 for _ in open(tmp_path / "val.jsonl")) == 500


def test_gen_is_byte_reproducible(tmp_path, capsys):
    for sub in ("a", "b"):
        run(capsys, "gen", "--task", "cpm3", "--seed", "3", "--out", str(tmp_path / sub))
    for name in ("train.jsonl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_flops(capsys):
    code, out = run(capsys, "flops", "--N", "8192", "--P", "4", "--H", "20", "--d", "128", "--schedule", "hybrid_4to1")
    assert code == 0 and json.loads(out.out)["window"] == 256


def test_flops_config_file(capsys, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"P": 2, "schedule": "hybrid_4to1"}))
    code, out = run(capsys, "flops", "--N", "1024", "--config", str(conf))
    assert json.loads(out.out)["window"] == 128
    code, out = run(capsys, "flops", "--N", "1024", "--P", "4", "--config", str(conf))
    assert json.loads(out.out)["window"] == 32


def test_params_table(capsys):
    code, out = run(capsys, "params", "--N", "16", "--d", "3", "--kmax", "4", "--nmax", "4")
    lines = out.out.splitlines()
    assert lines[0] == "family,size,mha,iha,note"
    assert "polyfilter,N=16;d=3;k=4,2660,1476,crossover_k=3" in lines


def test_gradcheck_command(capsys):
    code, out = run(capsys, "gradcheck", "--trials", "1")
    assert code == 0 and len(json.loads(out.out)) == 2


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as e:
        main(["verify", "--bogus"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2


def test_runtime_error_exit_code(capsys):
    code, out = run(capsys, "flops", "--N", "8", "--P", "4", "--schedule", "hybrid_4to1")
    assert code == 3 and "window" in out.err


def test_env_out_dir(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("IHALAB_OUT", str(tmp_path))
    run(capsys, "flops", "--N", "64", "--P", "2")
    assert (tmp_path / "flops.json").exists()
