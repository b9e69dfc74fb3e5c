import functools
import json

import pytest

from tokengate import cli
from tokengate import propcheck as pc


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"method": {"method": "SDAR"}, "steps": 3, "eval_every": 3, "group_size": 2,
                             "tasks_per_batch": 2, "hidden": 16}))
    return p


def test_train_and_resolved_config(tmp_path, config, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(config), "--set", "method.gate.beta=10", "--out", str(out)]) == 0
    assert "final_success" in capsys.readouterr().out
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["method"]["gate"]["beta"] == 10
    for name in ("metrics.jsonl", "summary.csv", "checkpoints/params_step3.bin"):
        assert (out / name).exists()
    # rerunning from the dump reproduces the metrics byte for byte
    again = tmp_path / "again"
    assert cli.main(["train", "--config", str(out / "config.resolved.json"), "--out", str(again)]) == 0
    assert (again / "metrics.jsonl").read_bytes() == (out / "metrics.jsonl").read_bytes()


def test_bad_key_exit_1(tmp_path, config, capsys):
    assert cli.main(["train", "--config", str(config), "--set", "method.bogus=1", "--out", str(tmp_path)]) == 1
    assert "method.bogus" in capsys.readouterr().err


def test_missing_config_exit_1(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1


def test_nonfinite_exit_2(tmp_path, config, monkeypatch):
    from tokengate import trainer

    def boom(*a, **k):
        raise trainer.NonFiniteLoss("nan")

    monkeypatch.setattr(cli, "run", boom)
    assert cli.main(["train", "--config", str(config), "--out", str(tmp_path)]) == 2


def test_eval(tmp_path, config, capsys):
    out = tmp_path / "run"
    cli.main(["train", "--config", str(config), "--out", str(out)])
    tasks = tmp_path / "tasks.json"
    tasks.write_text(json.dumps(["put_key_box", "put_pen_shelf"]))
    capsys.readouterr()
    ck = str(out / "checkpoints" / "params_step3.bin")
    assert cli.main(["eval", "--checkpoint", ck, "--tasks", str(tasks)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert set(res["outcomes"]) == {"put_key_box", "put_pen_shelf"}
    assert cli.main(["eval", "--checkpoint", ck, "--tasks", str(tasks), "--with-skills"]) == 0


def test_check_mutation_exit_3(tmp_path, monkeypatch, capsys):
    from test_propcheck import _live_gate_value

    monkeypatch.setattr(pc, "sdar_batch_value", _live_gate_value)
    monkeypatch.setattr(pc, "CHECKS", {"prop2": functools.partial(pc.check_prop2, 3, 5)})
    path = tmp_path / "res.json"
    assert cli.main(["check", "--json", str(path)]) == 3
    doc = json.loads(path.read_text())
    assert doc[0]["name"] == "prop2_gradient_form" and not doc[0]["passed"]


def test_check_json_lists_checks(tmp_path, monkeypatch):
    monkeypatch.setattr(pc, "CHECKS", {"prop1": functools.partial(pc.check_prop1, 2),
                                       "prop3": pc.check_prop3})
    path = tmp_path / "res.json"
    assert cli.main(["check", "--json", str(path)]) == 0
    doc = json.loads(path.read_text())
    assert [d["name"] for d in doc] == ["prop1_identity", "prop3_gate_slope"]
    assert all("max_error" in d for d in doc)


def test_sweep(tmp_path, config):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"method.gate.beta": [1, 5], "steps": [1]}))
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--config", str(config), "--grid", str(grid), "--out", str(out)]) == 0
    index = json.loads((out / "sweep.json").read_text())
    assert len(index) == 2
    seeds = {json.loads((out / d["dir"] / "config.resolved.json").read_text())["seed"] for d in index}
    assert len(seeds) == 2


def test_plot(tmp_path, config):
    out = tmp_path / "run"
    cli.main(["train", "--config", str(config), "--out", str(out)])
    svg = tmp_path / "g.svg"
    assert cli.main(["plot", "--metrics", str(out / "metrics.jsonl"), "--kind", "gate_ratio", "--out", str(svg)]) == 0
    text = svg.read_text()
    assert text.startswith("<svg") and text.count("<polyline") == 1
    svg2 = tmp_path / "g2.svg"
    cli.main(["plot", "--metrics", str(out / "metrics.jsonl"), "--kind", "gate_ratio", "--out", str(svg2)])
    assert svg2.read_bytes() == svg.read_bytes()


def test_plot_missing_column(tmp_path, config):
    out = tmp_path / "run"
    cli.main(["train", "--config", str(config), "--set", "method.method=GRPO", "--out", str(out)])
    assert cli.main(["plot", "--metrics", str(out / "metrics.jsonl"), "--kind", "gap",
                     "--out", str(tmp_path / "x.svg")]) == 1


def test_plot_series_range():
    from tokengate.plotting import series

    recs = [{"step": i, "gate_active_ratio": i / 10, "gap_per_turn": [-0.1, None, 0.2]} for i in range(1, 4)]
    xs, ys, _, _ = series(recs, "gate_ratio")
    assert xs == [1.0, 2.0, 3.0] and all(0 <= y <= 1 for y in ys)
    xs, ys, xl, _ = series(recs, "gap_profile")
    assert xl == "turn" and xs == [0.0, 2.0]
