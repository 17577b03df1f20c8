import json

from clog.cli import main

from conftest import tiny_config


def write_config(tmp_path, **overrides):
    path = tmp_path / "config.json"
    config = tiny_config(output_dir=str(tmp_path / "results"), **overrides)
    path.write_text(json.dumps(config.to_dict()))
    return path


def test_run_then_report(tmp_path, capsys):
    config = write_config(tmp_path)
    assert main(["run", "--config", str(config)]) == 0
    out = capsys.readouterr().out
    assert "AFQ" in out and "bundle hash" in out
    (bundle,) = (tmp_path / "results").iterdir()
    assert (bundle / "report.json").exists() and (bundle / "state" / "order1_grid0_task2.pt").exists()
    assert main(["report", "--bundle", str(bundle), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "summary.csv").exists()


def test_resume_token(tmp_path, capsys):
    config = write_config(tmp_path)
    assert main(["run", "--config", str(config)]) == 0
    first = capsys.readouterr().out.splitlines()[-1]
    (bundle,) = (tmp_path / "results").iterdir()
    token = bundle / "state" / "order1_grid0_task1.pt"
    assert main(["run", "--config", str(config), "--resume", str(token)]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == first


def test_grid_prints_json(tmp_path, capsys):
    config = write_config(tmp_path, strategy_id="l2", grid=[0.0, 1.0])
    assert main(["grid", "--config", str(config)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["param"] == "lambda" and doc["values"] == [0.0, 1.0] and doc["chosen"] in (0.0, 1.0)


def test_errors_exit_with_code_two(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dataset_id": "shapes8", "classes_per_task": 2, "strategy_id": "nope"}))
    assert main(["run", "--config", str(bad)]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["grid", "--config", str(write_config(tmp_path))]) == 2
