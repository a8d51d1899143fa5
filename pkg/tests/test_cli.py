import json

import pytest

from depauw.cli import main
from depauw.experiments import ExperimentConfig, run


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def test_no_subcommand_is_usage_error(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"depth": 3, "colour": "red"}))
    assert main(["density", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "colour" in capsys.readouterr().err


def test_bad_value_names_field(tmp_path, capsys):
    assert main(["trace", "--n", "0", "--out", str(tmp_path)]) == 2
    assert "config error in n" in capsys.readouterr().err


def test_density_check_passes_and_reruns_identically(tmp_path):
    a, c = tmp_path / "a", tmp_path / "c"
    args = ["density", "--depth", "10", "--check", "--residual-samples", "200000"]
    assert main([*args, "--out", str(a)]) == 0
    fa = _files(a)
    assert main([*args, "--out", str(a)]) == 0
    assert _files(a) == fa
    # out and workers are echoed in config.json but change no result
    assert main([*args, "--out", str(c), "--workers", "2"]) == 0
    fc = _files(c)
    assert {k: v for k, v in fa.items() if k != "config.json"} == {k: v for k, v in fc.items() if k != "config.json"}
    report = json.loads(fa["report.json"])["report"]
    assert report["properties"]["passed"] and report["refining"]["passed"]
    cfg = json.loads(fa["config.json"])
    for name, data in fa.items():
        text = data.decode()
        assert cfg["config_hash"] in text and "seed" in text, name


def test_trace_oracle(tmp_path, capsys):
    out = tmp_path / "t"
    status = main(["trace", "--n", "20000", "--depth", "4", "--oracle", "--oracle-points", "200",
                   "--oracle-stages", "1", "--check", "--out", str(out)])
    assert status == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["passed"] and "oracle.csv" in " ".join(summary["files"])
    rows = (out / "oracle.csv").read_text().splitlines()
    assert rows[0].startswith("# config_hash=") and float(rows[2].split(",")[3]) <= 1e-6


def test_invariant_failure_exits_one(tmp_path):
    cfg = ExperimentConfig(experiment="stochasticity", n=2000, depth=2, start_level=1, check=True,
                           out=str(tmp_path))
    res = run(cfg)
    # depth 2 is far too shallow to mix: the check must fail and leave a failure report
    assert res.status == 1
    assert (tmp_path / "failure.json").exists()


def test_field_eval(tmp_path):
    assert main(["field", "--t", "3/4", "--point", "3/10", "1/10", "--out", str(tmp_path)]) == 2
    assert main(["field", "--t", "3/4", "--point", "5/16", "1/16", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert json.dumps(rep)


def test_flow_subcommand(capsys):
    assert main(["flow", "--point", "1/4", "0", "--t-end", "1/2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines == ["point,t,x1,x2", "0,1/2^0,1/2^2,0/2^0", "0,1/2^1,0/2^0,7/2^2"]
    assert main(["flow", "--point", "1/4", "0", "--t-end", "0"]) == 2


def test_config_hash_ignores_workers_and_out():
    a = ExperimentConfig(experiment="trace", workers=1, out="x")
    b = ExperimentConfig(experiment="trace", workers=4, out="y")
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != ExperimentConfig(experiment="trace", seed=1).config_hash()
    with pytest.raises(ValueError):
        ExperimentConfig(experiment="trace", eps=[0.5])
