import json
import subprocess
import sys

import pytest

from spin7cayley.cli_experiments import ExperimentConfig, ResultTable, cell_rng, main


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_identities_deterministic(capsys):
    c1, o1, _ = _run(capsys, "identities", "--seed", "7", "--trials", "200")
    c2, o2, _ = _run(capsys, "identities", "--seed", "7", "--trials", "200")
    assert c1 == c2 == 0
    assert o1 == o2
    assert o1.startswith("identity,samples,value,tol,pass")


def test_tight_tolerance_fails(capsys):
    code, out, err = _run(capsys, "identities", "--trials", "200", "--tol", "1e-20")
    assert code == 1
    assert "false" in out and "FAIL" in err


def test_json_format(capsys):
    code, out, _ = _run(capsys, "symbols", "--trials", "50", "--format", "json")
    assert code == 0
    data = json.loads(out)
    assert isinstance(data, (dict, list))


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 3, "grid": {"n": 4}, "k": 1}))
    code, out, _ = _run(capsys, "moduli", "--config", str(cfg))
    assert code == 0
    assert out.splitlines()[1].split(",")[:3] == ["1", "4", "1"]


def test_moduli_k2(capsys):
    code, out, _ = _run(capsys, "moduli", "--k", "2", "--grid", "5")
    assert code == 0
    k, n, dim = out.splitlines()[1].split(",")[:3]
    assert (k, n, dim) == ("2", "5", "2")


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert _run(capsys, "moduli", "--config", str(bad))[0] == 2
    assert _run(capsys, "moduli", "--seed", "-1")[0] == 2
    with pytest.raises(ValueError):
        ExperimentConfig(k=7).validate()


def test_result_table():
    t = ResultTable(["a", "pass"])
    t.add(1.234567891, True)
    t.add("x", "")
    assert t.passed
    assert t.to_csv().splitlines() == ["a,pass", "1.234568e+00,true", "x,"]
    with pytest.raises(ValueError):
        t.add(1)
    t.add(2, False)
    assert not t.passed


def test_cell_rng_independent():
    a = cell_rng(1, "a").normal(size=3)
    assert (a == cell_rng(1, "a").normal(size=3)).all()
    assert not (a == cell_rng(1, "b").normal(size=3)).any()
    assert not (a == cell_rng(2, "a").normal(size=3)).any()


def test_module_entry_point(tmp_path):
    out = tmp_path / "o.csv"
    r = subprocess.run([sys.executable, "-m", "spin7cayley", "bsmetric", "--out", str(out)],
                       capture_output=True, text=True, timeout=300)
    assert r.returncode == 0, r.stderr
    assert out.read_text().startswith("quantity,h,value,pass")
