import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safelang import cli, harness
from safelang.harness import Aggregate, ConfigError, RunConfig


def small_config(tmp_path, arm="ppo_cp", **extra):
    d = {
        "arm": arm,
        "env": {"width": 6, "height": 6, "max_steps": 30, "seed": 0},
        "train": {"total_episodes": 8, "episodes_per_batch": 4, "hidden": [8, 8],
                  "minibatch_size": 64, "epochs": 2},
        "seeds": [0, 1],
        "embedder": {"iterations": 2, "pairs_per_iter": 32},
        "evaluation": {"episodes": 2},
        "output_dir": str(tmp_path / arm),
    }
    if arm in harness.CP_ARMS:
        d["costpred"] = {"threshold": 0.4}
    if arm == "ppo_cp_no_condenser":
        d["condenser"] = "identity"
    d.update(extra)
    return d


def test_config_rejects_unknown_keys(tmp_path):
    d = small_config(tmp_path)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({**d, "learning_rate": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({**d, "train": {"gamma": 0.9, "gama": 0.9}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({**d, "env": {"width": 3}})


def test_config_arm_invariants(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({**small_config(tmp_path, "ppo"), "costpred": {"threshold": 0.4}})
    d = small_config(tmp_path)
    d.pop("costpred")
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({**small_config(tmp_path), "arm": "sac"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({**small_config(tmp_path), "condenser": "remote"})


def test_config_round_trip_and_hash(tmp_path):
    cfg = RunConfig.from_dict(small_config(tmp_path))
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.hash == cfg.hash
    assert cfg.replace(output_dir="elsewhere").hash == cfg.hash
    assert cfg.replace(seeds=[5]).hash != cfg.hash


def test_shipped_configs_load():
    from pathlib import Path
    paths = sorted((Path(__file__).parent.parent / "configs").glob("*.json"))
    assert paths
    for p in paths:
        RunConfig.load(p)


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("runs")
    return {arm: harness.run(RunConfig.from_dict(small_config(tmp, arm)))
            for arm in ("ppo", "ppo_lag_oracle", "ppo_cp")}


def test_run_writes_outputs(finished):
    rep = finished["ppo_cp"]
    assert rep.complete and set(rep.seed_csvs) == {0, 1}
    out = rep.output_dir
    for name in ("aggregate.csv", "costpred.csv", "summary.json", "metadata.json"):
        assert (out / name).exists()
    for s in (0, 1):
        text = (out / f"seed_{s}" / "episodes.csv").read_text()
        assert text.startswith(f"# config_hash={rep.config.hash} ")
        assert len(harness.read_episodes_csv(out / f"seed_{s}" / "episodes.csv")) == 8
        assert (out / f"seed_{s}" / "checkpoint.npz").exists()
    assert "costpred.csv" not in {p.name for p in finished["ppo"].output_dir.iterdir()}
    summary = json.loads((out / "summary.json").read_text())
    assert summary["completed_seeds"] == [0, 1] and not summary["partial"]


def test_rerun_is_byte_identical(finished, tmp_path):
    rep = finished["ppo_cp"]
    again = harness.run(rep.config.replace(output_dir=str(tmp_path / "again")))
    for s, path in rep.seed_csvs.items():
        assert again.seed_csvs[s].read_bytes() == path.read_bytes()
    assert (again.output_dir / "aggregate.csv").read_bytes() == \
           (rep.output_dir / "aggregate.csv").read_bytes()


def test_smooth_is_trailing_mean():
    np.testing.assert_allclose(harness.smooth([1, 2, 3, 4], window=2), [1, 1.5, 2.5, 3.5])
    np.testing.assert_allclose(harness.smooth([5.0] * 30), [5.0] * 30)


def test_final_window_uses_last_tenth():
    rows = [{"reward_sum": float(i), "oracle_cost_sum": i % 2, "predicted_cost_sum": 0}
            for i in range(100)]
    fw = harness.final_window(rows)
    assert fw["episodes"] == 10 and fw["reward_mean"] == pytest.approx(94.5)


def _rows(values):
    return [{"reward_sum": v, "oracle_cost_sum": v * 2, "predicted_cost_sum": -v} for v in values]


@settings(max_examples=25)
@given(st.lists(st.lists(st.floats(-10, 10), min_size=6, max_size=6), min_size=3, max_size=3))
def test_aggregate_merge_is_associative(series):
    a, b, c = (Aggregate.of_seed(_rows(s), window=3) for s in series)
    left, right = a.merge(b).merge(c), a.merge(b.merge(c))
    for m in harness.AGG_METRICS:
        np.testing.assert_allclose(left.mean(m), right.mean(m), atol=1e-12)
        np.testing.assert_array_equal(left.mins[m], right.mins[m])
        np.testing.assert_array_equal(left.maxs[m], right.maxs[m])


def test_sweep_recall_non_increasing(tmp_path):
    cfg = RunConfig.from_dict(small_config(tmp_path, evaluation={"episodes": 4}))
    table = harness.sweep_threshold(cfg, [0.9, -0.99, 0.4, 0.0, 1.0])
    assert [t for t, *_ in table] == [-0.99, 0.0, 0.4, 0.9, 1.0]
    recalls = [r for _, _, r, _ in table]
    assert all(a >= b for a, b in zip(recalls, recalls[1:]))
    assert recalls[0] == 1.0 and recalls[-1] == 0.0
    with pytest.raises(ValueError):
        harness.sweep_threshold(cfg, [])


def test_compare_self_is_zero_and_mismatch_rejected(finished, tmp_path):
    rep = finished["ppo"]
    table = harness.compare_arms([rep.output_dir, rep.output_dir])
    assert table["deltas"][0]["reward_delta"] == 0 and table["deltas"][0]["oracle_cost_delta"] == 0
    three = harness.compare_arms([r.output_dir for r in finished.values()])
    assert [r["arm"] for r in three["arms"]] == ["ppo", "ppo_lag_oracle", "ppo_cp"]
    other = json.loads((rep.output_dir / "summary.json").read_text())
    other["env"]["width"] = 9
    with pytest.raises(ConfigError):
        harness.compare_arms([rep.output_dir, other])


def test_cli_smoke(finished, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(small_config(tmp_path, "ppo", evaluation={"episodes": 1})))
    assert cli.main(["run", "--config", str(cfg), "--seed", "0", "--out", str(tmp_path / "cli")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["completed_seeds"] == [0]
    assert cli.main(["compare", str(tmp_path / "cli"), str(finished["ppo"].output_dir),
                     "--out", str(tmp_path / "cmp.csv")]) == 0
    assert (tmp_path / "cmp.csv").read_text().startswith("arm,reward_mean")
    cp = tmp_path / "cp.json"
    cp.write_text(json.dumps(small_config(tmp_path, "ppo_cp", evaluation={"episodes": 2})))
    capsys.readouterr()
    assert cli.main(["sweep", "--config", str(cp), "--thresholds", "0.2,0.4"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "threshold,precision,recall,f1"
    assert cli.main(["eval-costpred", "--config", str(cp)]) == 0
    assert "finetuned" in capsys.readouterr().out
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"arm": "ppo", "bogus": 1}))
    assert cli.main(["run", "--config", str(bad)]) == 2
