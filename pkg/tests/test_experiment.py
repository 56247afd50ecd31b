import json

import numpy as np
import pytest

from sonetlab.attacks import AttackConfig, AttackResult, RobustReport
from sonetlab.blocks import NetworkSpec, assemble_network
from sonetlab.cli import main
from sonetlab.experiment import (ARTIFACTS, DataConfig, ExperimentConfig, emit_table,
                                 parse_attack_list, run_experiment, step_rows)
from sonetlab.solvers import SolverConfig
from sonetlab.training import TrainConfig


def _cfg(tmp_path, attacks="pgd_linf:3", solver=SolverConfig("dopri5", tol=0.1)):
    return ExperimentConfig(
        NetworkSpec("sonet", channels=2, layers=1, in_channels=1, classes=2, solver=solver,
                    activation="tanh"),
        TrainConfig(epochs=2, batch_size=16, lr=0.1, milestones=(1,)),
        parse_attack_list(attacks, {"pgd_linf": {"epsilon": 0.1, "step": 0.02}}),
        DataConfig("blobs", n_train=48, n_test=16, eval_examples=16),
        out=str(tmp_path / "run"), seed=3)


def test_config_round_trip(tmp_path):
    cfg = _cfg(tmp_path, "pgd_linf:7,spsa,cw_linf")
    back = ExperimentConfig.from_ini(cfg.to_ini())
    assert back == cfg
    assert back.attacks[0].seed == 3 and back.model.seed == 3 and back.train.seed == 3


def test_parse_attack_list():
    out = parse_attack_list("pgd_linf:20, spsa", {"spsa": {"epsilon": 0.3}})
    assert [a.label for a in out] == ["pgd_linf^20", "spsa^20"]
    assert out[1].epsilon == 0.3 and out[0].epsilon == 0.031
    assert parse_attack_list("") == []
    with pytest.raises(ValueError):
        parse_attack_list("fgsm")


def test_run_experiment_artifacts(tmp_path):
    cfg = _cfg(tmp_path)
    rep = run_experiment(cfg)
    out = tmp_path / "run"
    assert sorted(p.name for p in out.iterdir()) == sorted(ARTIFACTS)
    assert json.loads((out / "manifest.json").read_text())["status"] == "complete"
    assert ExperimentConfig.load(out / "config.ini") == cfg
    assert RobustReport.from_dict(json.loads((out / "report.json").read_text())) == rep
    rows = [json.loads(line) for line in (out / "steps.jsonl").read_text().splitlines()]
    assert {r["pgd_iterations"] for r in rows} == {0, 1, 3}
    assert all(r["accepted_times"][0] == 0.0 and r["accepted_times"][-1] == 1.0 for r in rows)
    log = (out / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,lr,loss,acc" and len(log) == 3


def test_run_experiment_is_deterministic(tmp_path):
    run_experiment(_cfg(tmp_path), out=tmp_path / "a")
    run_experiment(_cfg(tmp_path), out=tmp_path / "b")
    for name in ("report.csv", "report.json", "steps.jsonl", "checkpoint.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_empty_attack_list_reports_only_natural(tmp_path):
    rep = run_experiment(_cfg(tmp_path, attacks="", solver=SolverConfig("euler")))
    assert rep.results == []
    lines = (tmp_path / "run" / "report.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].split(",")[3] == ""


def test_failed_run_keeps_manifest(tmp_path):
    cfg = _cfg(tmp_path)
    cfg.data = DataConfig("cifar", path=str(tmp_path / "missing"))
    with pytest.raises(FileNotFoundError):
        run_experiment(cfg)
    man = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert man["status"] == "failed" and man["completed"] == ["config"]
    assert "FileNotFoundError" in man["error"]
    assert (tmp_path / "run" / "config.ini").exists()


def _report(model, channels, a_nat, attacks, solver=""):
    return RobustReport(model, channels, a_nat, 100, 0,
                        [AttackResult(a, 0.031, 20, v) for a, v in attacks.items()], solver)


def test_emit_table_layouts():
    reps = [_report("sonet", 32, 0.8, {"pgd_linf^20": 0.4}),
            _report("soblock", 64, 0.9, {"pgd_linf^20": 0.5, "cw_linf^100": 0.0})]
    one = emit_table(reps[:1], "table1").splitlines()
    assert one == ["model,channels,A_nat,pgd_linf^20", "sonet,32,80.00,40.00"]
    table = emit_table(reps, "table3")
    assert table == emit_table(reps[::-1], "table3")
    assert table.splitlines()[2] == "sonet,32,80.00,,40.00"
    t2 = emit_table([_report("soblock", 8, 0.9, {}, "rk4(h=1)")], "table2")
    assert t2.splitlines()[0].startswith("model,solver,A_nat")
    with pytest.raises(ValueError):
        emit_table(reps, "table9")


def test_emit_table4_format():
    rows = [{"solver": "dopri5(tol=0.1)", "tol": 0.1, "pgd_iterations": 20, "example": 0,
             "accepted_times": [0.0, 0.26213, 1.0], "rejected": 0},
            {"solver": "dopri5(tol=0.001)", "tol": 0.001, "pgd_iterations": 1, "example": 0,
             "accepted_times": [0.0, 0.1, 0.4, 1.0], "rejected": 1}]
    lines = emit_table(rows, "table4").splitlines()
    assert lines[0] == "solver,pgd_iterations,accepted_times"
    assert lines[1] == 'dopri5(tol=0.1),20,"[0.0, 0.262, 1.0]"'
    assert emit_table(rows[::-1], "table4") == emit_table(rows, "table4")


def test_step_rows_layout(tmp_path):
    spec = _cfg(tmp_path).model
    model = assemble_network(spec)
    x = np.random.default_rng(0).uniform(size=(2, 1, 4, 4))
    rows = step_rows(model, x, np.array([0, 1]), AttackConfig("pgd_linf", 0.1, 0.02, 5),
                     [0, 2], examples=2)
    assert [(r["pgd_iterations"], r["example"]) for r in rows] == [(0, 0), (0, 1), (2, 0),
                                                                   (2, 1)]
    assert rows[0]["solver"] == "dopri5(tol=0.1)"


def test_cli_stability_check(capsys):
    assert main(["stability-check", "--blocks", "10", "--dim", "6"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["certificates"]["stable"] == 10
    assert out["certificates"]["worst_eigen_gap"] <= 1e-9
    assert out["orthogonality_max_deviation"] < 1e-6


def test_cli_train_attack_report(tmp_path, capsys):
    cfg_path = tmp_path / "exp.ini"
    _cfg(tmp_path).save(cfg_path)
    out = tmp_path / "cli"
    assert main(["train", "--config", str(cfg_path), "--out", str(out), "--epochs", "1",
                 "--solver", "euler"]) == 0
    first = json.loads(capsys.readouterr().out)
    assert first["out"] == str(out)
    saved = ExperimentConfig.load(out / "config.ini")
    assert saved.train.epochs == 1 and saved.model.solver.method == "euler"
    assert saved.attacks == []

    assert main(["attack", "--config", str(out / "config.ini"), "--checkpoint",
                 str(out / "checkpoint.bin"), "--attack", "pgd_linf:2,spsa:2",
                 "--out", str(tmp_path / "atk")]) == 0
    csv_out = capsys.readouterr().out.splitlines()
    assert csv_out[0].startswith("model,channels,solver,attack") and len(csv_out) == 3

    assert main(["report", str(tmp_path / "atk"), "--layout", "table3"]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0] == "model,channels,A_nat,pgd_linf^2,spsa^2"
