import csv
import io
import json
import math

import numpy as np
import pytest

from nfmpc import bench
from nfmpc.bench import (
    EpisodeRecord,
    TimingRecord,
    aggregate,
    emit_outputs,
    load_config,
    read_outputs,
    run_experiment,
    summary_csv,
    timing_report,
)
from nfmpc.cli import EXIT_CONFIG, EXIT_IO, main
from nfmpc.controller import ConfigurationError
from nfmpc.training import build_models, save_training, TrainConfig, TrainResult

HEADER = "controller,N,success_rate,cost_q1,cost_median,cost_q3,mean_step_ms"


def small_config(**kw):
    base = dict(preset="desk", horizon=4, episode_length=15, episodes=2, samples=[8])
    base.update(kw)
    preset = base.pop("preset")
    merged = json.loads(json.dumps(bench.PRESETS[preset]))
    merged.update(base)
    return bench.ExperimentConfig(**merged)


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    cfg = TrainConfig(horizon=4, flow_blocks=2, flow_hidden=8, shift_hidden=8,
                      env=bench.PRESETS["desk"]["env"], episode_length=15)
    flow, shift = build_models(cfg)
    save_training(TrainResult(flow, shift, [], 0), cfg, out)
    return out


def test_empty_records_give_header_only():
    assert summary_csv(aggregate([], [])) == HEADER + "\n"


def test_zero_episodes_exit_zero(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"preset": "desk"}))
    code = main(["eval", "--config", str(cfg), "--episodes", "0", "--out", str(tmp_path / "o"),
                 "--controller", "mppi,nfmpc"])
    assert code == 0
    assert (tmp_path / "o" / "summary.csv").read_text() == HEADER + "\n"
    assert (tmp_path / "o" / "episodes.jsonl").read_text() == ""


def _record(cost, outcome="success", name="mppi", n=8, k=0):
    return EpisodeRecord(name, n, k, k, outcome, cost, 3, [])


def test_quartiles_of_one_to_five():
    rows = aggregate([_record(float(c), k=c) for c in range(1, 6)], [])
    assert rows[0]["cost_median"] == 3.0
    assert rows[0]["cost_q1"] <= 3.0 <= rows[0]["cost_q3"]
    assert math.isnan(rows[0]["mean_step_ms"])


def test_no_successes_leave_cost_fields_empty():
    rows = aggregate([_record(5.0, "collision")], [TimingRecord("mppi", 8, 0, 2, 0.01, {"rollout": 0.01})])
    line = summary_csv(rows).splitlines()[1]
    assert line == "mppi,8,0.0,,,,5.0"


def test_timing_ratio_example():
    t = [TimingRecord("mppi", 32, 0, 10, 0.100, {"rollout": 0.1}),
         TimingRecord("nfmpc", 32, 0, 10, 0.161, {"flow": 0.1, "rollout": 0.061})]
    rows = timing_report(t)
    assert rows[1]["ratio_to_mppi"] == pytest.approx(1.61)
    assert rows[0]["ratio_to_mppi"] == 1.0
    assert all(r["ratio_to_mppi"] >= 0 for r in rows)


def test_timing_without_baseline_warns(caplog):
    rows = timing_report([TimingRecord("nfmpc", 32, 0, 4, 0.04, {})])
    assert rows[0]["mean_step_ms"] == pytest.approx(10.0)
    assert math.isnan(rows[0]["ratio_to_mppi"])
    assert "baseline" in caplog.text


def test_experiment_round_trip_and_determinism(tmp_path, checkpoint):
    cfg = small_config(controllers=["mppi", "nfmpc", "nfmpc-identity", "flowmppi"],
                       checkpoint=str(checkpoint))
    rows, recs, tms = run_experiment(cfg)
    emit_outputs(rows, recs, tms, tmp_path / "a", cfg)
    again = run_experiment(cfg)
    emit_outputs(*again, tmp_path / "b", cfg)
    assert (tmp_path / "a" / "episodes.jsonl").read_bytes() == (tmp_path / "b" / "episodes.jsonl").read_bytes()
    # all controllers see the same environments
    seeds = {r.controller: [x.seed for x in recs if x.controller == r.controller] for r in recs}
    assert len({tuple(v) for v in seeds.values()}) == 1
    back_recs, back_tms = read_outputs(tmp_path / "a")
    assert summary_csv(aggregate(back_recs, back_tms)) == (tmp_path / "a" / "summary.csv").read_text()
    for row in csv.DictReader(io.StringIO((tmp_path / "a" / "summary.csv").read_text())):
        assert 0.0 <= float(row["success_rate"]) <= 1.0
        assert np.isfinite(float(row["mean_step_ms"]))
        if row["cost_median"]:
            q = [float(row[k]) for k in ("cost_q1", "cost_median", "cost_q3")]
            assert q == sorted(q) and all(np.isfinite(q))
    resolved = json.loads((tmp_path / "a" / "config.resolved.json").read_text())
    assert resolved["horizon"] == 4


def test_warm_start_option_runs(checkpoint):
    cfg = small_config(controllers=["mppi", "nfmpc"], checkpoint=str(checkpoint), warm_start_iters=2,
                       episodes=1)
    rows, _, _ = run_experiment(cfg)
    assert [r["controller"] for r in rows] == ["mppi", "nfmpc"]


def test_missing_checkpoint_is_configuration_error(tmp_path):
    cfg = small_config(controllers=["nfmpc"], checkpoint=str(tmp_path / "nowhere"))
    with pytest.raises(ConfigurationError):
        run_experiment(cfg)
    with pytest.raises(ConfigurationError):
        run_experiment(small_config(controllers=["flowmppi"]))


def test_checkpoint_horizon_mismatch(checkpoint):
    cfg = small_config(controllers=["nfmpc"], checkpoint=str(checkpoint), horizon=6)
    with pytest.raises(ConfigurationError):
        run_experiment(cfg)


def test_config_loading(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"preset": "desk", "horizon": 8, "env": {"drift": 0.1}}))
    cfg = load_config(p, seed=3, samples="16,32")
    assert cfg.horizon == 8 and cfg.seed == 3 and cfg.samples == [16, 32]
    assert cfg.env.n_obstacles == 4 and cfg.env.drift == 0.1
    p.write_text(json.dumps({"horizn": 8}))
    with pytest.raises(ConfigurationError):
        load_config(p)
    p.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_config(p)
    with pytest.raises(ConfigurationError):
        load_config(None, controllers="mppi,cem")
    with pytest.raises(ConfigurationError):
        load_config(None, samples="")


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"preset": "nope"}))
    assert main(["eval", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert not (tmp_path / "o").exists()
    assert main(["eval", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "o")]) == EXIT_IO
    blocker = tmp_path / "file"
    blocker.write_text("x")
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"preset": "desk", "horizon": 4, "episode_length": 3}))
    assert main(["eval", "--config", str(good), "--episodes", "1", "--samples", "4",
                 "--out", str(blocker / "sub")]) == EXIT_IO
    assert main(["verify", "--checks", "bogus"]) == EXIT_CONFIG


def test_cli_timing_and_verify(tmp_path, capsys):
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"preset": "desk", "horizon": 4, "episode_length": 3}))
    assert main(["timing", "--config", str(good), "--episodes", "1", "--samples", "4,8",
                 "--out", str(tmp_path / "t")]) == 0
    text = (tmp_path / "t" / "timing.csv").read_text().splitlines()
    assert text[0].startswith("controller,N,mean_step_ms") and len(text) == 3
    assert main(["verify", "--checks", "sigmoid,weights", "--out", str(tmp_path / "v")]) == 0
    lines = (tmp_path / "v" / "verify.txt").read_text().splitlines()
    assert len(lines) == 2 and all(line.startswith("PASS") for line in lines)


def test_cli_train_small(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"preset": "desk", "horizon": 4, "episode_length": 5,
                               "train": {"flow_blocks": 1, "flow_hidden": 4, "shift_hidden": 4,
                                         "val_every": 0}}))
    assert main(["train", "--config", str(cfg), "--episodes", "2", "--out", str(tmp_path / "m")]) == 0
    assert {p.name for p in (tmp_path / "m").iterdir()} == {
        "flow.ckpt", "shift.ckpt", "learning_curve.csv", "train_config.json"}
    ev = main(["eval", "--config", str(cfg), "--episodes", "1", "--samples", "4", "--controller", "nfmpc",
               "--out", str(tmp_path / "e")])
    assert ev == EXIT_CONFIG  # no checkpoint given in the config
