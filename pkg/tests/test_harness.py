import json

import numpy as np
import pytest

from condserv.demomodel import load_demo
from condserv.harness import (FAILURE_LABELS, SCENARIO_FILE, THREADS_ENV, ExperimentConfig,
                              MissingModel, RecoveryTable, ResultTable, StrategyResult,
                              episode_seeds, evaluate, evaluate_recovery, generate_dataset,
                              load_demos, record_demos, selection_rows, split_dataset,
                              worker_count)
from condserv.mlp import Dataset, MlpModel, load_dataset
from condserv.scoring import Strategy
from condserv.servo import EpisodeTrace
from condserv.sim import preset, replay_open_loop, demo_state, task_success


@pytest.fixture
def serial(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "1")


# -- configuration ------------------------------------------------------------------------

def test_experiment_config_defaults_and_counts(sim):
    cfg = ExperimentConfig()
    assert cfg.strategies == tuple(Strategy)
    assert cfg.episode_count(sim) == 300
    assert ExperimentConfig(episodes=7).episode_count(sim) == 7
    assert ExperimentConfig(episodes_per_object=2).episode_count(sim) == 6
    assert ExperimentConfig(strategies=("Reprojection",)).strategies == (Strategy.REPROJECTION,)


@pytest.mark.parametrize("kwargs", [{"strategies": ()}, {"strategies": ("Mlp", "Mlp")},
                                    {"episodes": 0}, {"episodes_per_object": 0},
                                    {"master_seed": -1}, {"drop_p": 1.5}, {"recovery": "Undo"},
                                    {"strategies": ("Nearest",)}])
def test_experiment_config_rejects(kwargs):
    with pytest.raises(ValueError):
        ExperimentConfig(**kwargs)


def test_episode_seeds():
    assert episode_seeds(0, 5) == episode_seeds(0, 5)
    seeds = {episode_seeds(m, i, p) for m in (0, 1) for i in range(20)
             for p in ("eval", "dataset", "recovery")}
    assert len(seeds) == 120
    scene, episode = episode_seeds(3, 4)
    assert scene != episode and all(isinstance(v, int) for v in (scene, episode))


def test_worker_count(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert worker_count() >= 1
    monkeypatch.setenv(THREADS_ENV, "3")
    assert worker_count() == 3
    for bad in ("0", "-2", "many"):
        monkeypatch.setenv(THREADS_ENV, bad)
        with pytest.raises(ValueError):
            worker_count()


# -- demonstrations ---------------------------------------------------------------------

def test_record_demos_writes_a_loadable_set(tmp_path, sim):
    paths = record_demos(sim, tmp_path / "demos")
    assert sorted(p.name for p in paths) == ["square", "trapezoid", "triangle"]
    assert (tmp_path / "demos" / SCENARIO_FILE).is_file()
    demos, loaded = load_demos(tmp_path / "demos")
    assert demos.ids == ["square", "trapezoid", "triangle"]
    assert loaded.to_dict() == sim.to_dict()
    for d in demos:
        assert task_success(replay_open_loop(d, demo_state(sim, d.id), sim), d.id)
    assert load_demo(paths[0]).first.mask.any()


def test_load_demos_needs_a_scenario(tmp_path, sim):
    record_demos(sim, tmp_path / "demos")
    (tmp_path / "demos" / SCENARIO_FILE).unlink()
    with pytest.raises(FileNotFoundError):
        load_demos(tmp_path / "demos")
    _, s = load_demos(tmp_path / "demos", "standard3")
    assert s.name == "standard3"


# -- training data ------------------------------------------------------------------------------

def synthetic_trace(events):
    return EpisodeTrace([{"event": "start"}, *events, {"event": "end"}])


def score(demo, d):
    return {"demo_id": demo, "d_pq": d, "d_cq": d, "d_rp": d, "d_mlp": None, "inlier_count": 9}


def test_selection_rows_label_inserted_completions():
    unscorable = {"unscorable": "InsufficientInliers"}
    t = synthetic_trace([
        {"event": "select", "chosen": "a", "scores": [score("a", 0.1), score("b", 0.2)]},
        {"event": "release", "kind": "a", "inserted": True},
        {"event": "segment", "outcome": "DemoComplete"},
        {"event": "select", "chosen": "b", "scores": [score("b", 0.3)]},
        {"event": "release", "kind": "b", "inserted": False},
        {"event": "segment", "outcome": "DemoComplete"},
        {"event": "select", "chosen": "c", "scores": [{**score("c", 0.4), "d_pq": unscorable}]},
        {"event": "segment", "outcome": "Timeout"},
    ])
    rows = selection_rows(t, run=7)
    assert [r[1] for r in rows] == [1, 0, 0]
    assert rows[0][0] == [0.1, 0.1, 0.1] and rows[2][0] is None
    assert rows[1][2] == {"run": 7, "selection": 1, "demo_id": "b"}


def test_split_is_two_to_one_and_seeded():
    ds = Dataset(np.arange(300.0).reshape(100, 3), np.r_[np.ones(50), np.zeros(50)])
    a, b = split_dataset(ds, 0)
    assert abs(len(a) - 2 * len(b)) <= 2 and len(a) + len(b) == 100
    assert not set(a.features[:, 0]) & set(b.features[:, 0])
    a2, _ = split_dataset(ds, 0)
    assert np.array_equal(a.features, a2.features)
    a3, _ = split_dataset(ds, 1)
    assert not np.array_equal(a.features, a3.features)


def test_generate_dataset(tmp_path, sim, demos, serial):
    train_set, test_set = generate_dataset(sim, demos, n_runs=6, master_seed=0,
                                           out_path=tmp_path / "d.json")
    n = len(train_set) + len(test_set)
    assert n >= 6
    assert abs(len(train_set) - 2 * n / 3) <= 1
    for ds in (train_set, test_set):
        assert np.all(np.isfinite(ds.features)) and np.all(ds.features >= 0)
        assert set(np.unique(ds.labels)) <= {0.0, 1.0}
    back_train, back_test = load_dataset(tmp_path / "d.json")
    assert np.array_equal(back_train.features, train_set.features)
    assert back_test.meta == test_set.meta
    with pytest.raises(ValueError):
        generate_dataset(sim, demos, n_runs=0)


# -- tables ------------------------------------------------------------------------------------

def result(strategy="Reprojection", n=10, first=7, full=4, hist=(3, 1, 2, 0)):
    return StrategyResult(strategy, n, first, full, dict(zip(FAILURE_LABELS, hist)))


def test_strategy_result_checks():
    assert result().first_object == 0.7 and result().all_objects == 0.4
    with pytest.raises(ValueError):
        result(first=11)
    with pytest.raises(ValueError):
        result(hist=(1, 1, 1, 1))
    with pytest.raises(ValueError):
        StrategyResult("x", 10, 1, 10, {"Other": 0})


def test_result_table_json_round_trip():
    table = ResultTable((result(), result("UniformRandom", 10, 5, 2, (0, 0, 8, 0))),
                        {"master_seed": 3})
    back = ResultTable.from_json(table.to_json())
    assert back == table
    assert back.row("UniformRandom").first_object == 0.5
    text = table.to_text()
    assert "Reprojection" in text and "70.0%" in text and "UndecidedFlow" in text


def test_recovery_table_round_trip():
    t = RecoveryTable("Reprojection", 0.25, 20, {"Reselect": 12, "Retrack": 5},
                      {"Reselect": 9, "Retrack": 8})
    assert RecoveryTable.from_json(t.to_json()) == t
    assert t.rate("Reselect") == 0.6
    assert "Retrack" in t.to_text()


# -- evaluation ---------------------------------------------------------------------------------

SMALL = dict(episodes=3, strategies=("UniformRandom", "Reprojection"), master_seed=11)


def test_evaluate_writes_tables_and_traces(tmp_path, sim, demos, serial):
    table = evaluate(ExperimentConfig(**SMALL, out_dir=str(tmp_path)), demos, sim=sim)
    assert [r.strategy for r in table.rows] == ["UniformRandom", "Reprojection"]
    assert all(r.episodes == 3 for r in table.rows)
    assert ResultTable.from_json((tmp_path / "results.json").read_text()) == table
    assert (tmp_path / "results.txt").read_text() == table.to_text()
    lines = (tmp_path / "traces" / "Reprojection.jsonl").read_text().splitlines()
    events = [json.loads(x) for x in lines]
    assert {e["episode"] for e in events} == {0, 1, 2}
    assert sum(e["event"] == "end" for e in events) == 3


def test_single_strategy_table(sim, demos, serial):
    table = evaluate(ExperimentConfig(episodes=2, strategies=("PointQuality",)), demos, sim=sim)
    assert len(table.rows) == 1 and table.rows[0].strategy == "PointQuality"


def test_evaluate_is_deterministic(tmp_path, sim, demos, serial):
    evaluate(ExperimentConfig(**SMALL, out_dir=str(tmp_path / "a")), demos, sim=sim)
    evaluate(ExperimentConfig(**SMALL, out_dir=str(tmp_path / "b")), demos, sim=sim)
    for name in ("results.json", "traces/UniformRandom.jsonl", "traces/Reprojection.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_worker_pool_gives_the_same_results(tmp_path, sim, demos, monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "1")
    evaluate(ExperimentConfig(**SMALL, out_dir=str(tmp_path / "one")), demos, sim=sim)
    monkeypatch.setenv(THREADS_ENV, "2")
    evaluate(ExperimentConfig(**SMALL, out_dir=str(tmp_path / "two")), demos, sim=sim)
    for name in ("results.json", "traces/Reprojection.jsonl"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_mlp_needs_a_model(sim, demos):
    with pytest.raises(MissingModel):
        evaluate(ExperimentConfig(episodes=1, strategies=("Mlp",)), demos, sim=sim)
    with pytest.raises(MissingModel):
        evaluate_recovery(ExperimentConfig(episodes=1), demos, sim=sim, strategy="Mlp")


def test_mlp_strategy_runs_with_a_model(sim, demos, serial):
    table = evaluate(ExperimentConfig(episodes=1, strategies=("Mlp",)), demos, MlpModel.zeros(),
                     sim=sim)
    assert table.rows[0].strategy == "Mlp"


def test_recovery_without_drops_gives_identical_modes(tmp_path, sim, demos, serial):
    table = evaluate_recovery(ExperimentConfig(episodes=2, drop_p=0.0, out_dir=str(tmp_path)),
                              demos, sim=sim)
    a = (tmp_path / "traces" / "recovery_Reselect.jsonl").read_bytes()
    b = (tmp_path / "traces" / "recovery_Retrack.jsonl").read_bytes()
    assert a == b
    assert table.successes["Reselect"] == table.successes["Retrack"]
    assert table.drops == {"Reselect": 0, "Retrack": 0}
    assert RecoveryTable.from_json((tmp_path / "recovery.json").read_text()) == table


def test_recovery_with_certain_drops(sim, demos, serial):
    table = evaluate_recovery(ExperimentConfig(episodes=2, drop_p=1.0, log_steps=False), demos,
                              sim=sim)
    assert table.successes["Retrack"] == 0
    assert table.drops["Retrack"] >= 2


def test_other_scenarios_resolve():
    assert ExperimentConfig(scenario="stacked").sim().name == preset("stacked").name
