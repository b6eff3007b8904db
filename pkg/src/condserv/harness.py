"""Experiment drivers: demo recording, training data, and evaluation tables.

Every episode is seeded from ``(master_seed, purpose, index)``, so episode
``i`` starts from the same scene for every strategy compared in one run and
results do not depend on how many worker processes were used.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .demomodel import DemoSet, load_demo_set, save_demo
from .flow import get_estimator
from .mlp import Dataset, MlpModel, save_dataset
from .scoring import Strategy
from .servo import EpisodeCache, EpisodeTrace, Outcome, Recovery, ServoConfig, run_episode
from .sim.config import SimConfig, load_config, resolve_scenario, save_config
from .sim.dynamics import demo_state, reset, task_success
from .sim.scripted import ScriptedPolicyError, record_all, replay_open_loop

FAILURE_LABELS = ("UndecidedFlow", "WrongObject", "IncorrectFlow", "Other")
THREADS_ENV = "CONDSERV_THREADS"
SCENARIO_FILE = "scenario.json"

# keeps the seeds of training runs, evaluation and the recovery study disjoint
_PURPOSE = {"eval": 0, "dataset": 1, "recovery": 2, "split": 3}


class MissingModel(RuntimeError):
    """The Mlp strategy was requested without a trained model."""


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "standard3"
    strategies: tuple[Strategy, ...] = tuple(Strategy)
    episodes_per_object: int = 100
    episodes: int | None = None  # total count; overrides episodes_per_object when set
    master_seed: int = 0
    estimator: str = "oracle"
    drop_p: float = 0.0
    recovery: Recovery = Recovery.RESELECT
    out_dir: str | None = None
    servo: ServoConfig = field(default_factory=ServoConfig)
    log_steps: bool = True

    def __post_init__(self):
        strategies = tuple(Strategy(s) for s in self.strategies)
        if not strategies or len(set(strategies)) != len(strategies):
            raise ValueError("strategies must be a non-empty list without repeats")
        object.__setattr__(self, "strategies", strategies)
        object.__setattr__(self, "recovery", Recovery(self.recovery))
        if self.episodes_per_object < 1 or (self.episodes is not None and self.episodes < 1):
            raise ValueError("episode counts must be >= 1")
        if self.master_seed < 0:
            raise ValueError("master seed must be non-negative")
        if not 0.0 <= self.drop_p <= 1.0:
            raise ValueError("drop_p must be a probability")

    def sim(self) -> SimConfig:
        return resolve_scenario(self.scenario)

    def episode_count(self, sim: SimConfig) -> int:
        if self.episodes is not None:
            return self.episodes
        return self.episodes_per_object * len(sim.shapes)


def episode_seeds(master_seed: int, index: int, purpose: str = "eval") -> tuple[int, int]:
    """Scene seed and episode seed (selection and drop streams) for one episode."""
    scene, episode = np.random.SeedSequence([master_seed, _PURPOSE[purpose], index]).spawn(2)
    return int(scene.generate_state(1)[0]), int(episode.generate_state(1)[0])


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


# -- worker plumbing -----------------------------------------------------------
# Episodes are independent, so they are farmed out by index. Each worker holds
# one copy of the shared context; results come back in index order.

_CTX: dict = {}


def _set_context(ctx: dict) -> None:
    _CTX.clear()
    _CTX.update(ctx)
    _CTX["estimator"] = get_estimator(ctx["estimator_name"], ctx["sim"])


def _map_episodes(fn, n: int, ctx: dict) -> list:
    workers = min(worker_count(), n)
    if workers <= 1:
        _set_context(ctx)
        return [fn(i) for i in range(n)]
    with ProcessPoolExecutor(workers, initializer=_set_context, initargs=(ctx,)) as pool:
        return list(pool.map(fn, range(n), chunksize=max(1, n // (4 * workers))))


def _trace_lines(index: int, trace: EpisodeTrace) -> str:
    return "".join(json.dumps({"episode": index, **e}, sort_keys=True) + "\n" for e in trace.events)


# -- demonstrations ----------------------------------------------------------------

def record_demos(sim: SimConfig, out_dir) -> list[Path]:
    """Record one scripted demonstration per shape and save them under ``out_dir``.

    Each demo is replayed open loop from its own recording scene before it is
    written; a replay that does not insert the piece is an error. The scenario
    is saved next to the demos so later commands can rebuild the simulator.
    """
    demos = record_all(sim)
    for d in demos:
        if not d.first.mask.any():
            raise ScriptedPolicyError(d.id, "first frame has an empty mask")
        final = replay_open_loop(d, demo_state(sim, d.id), sim)
        if not task_success(final, d.id):
            raise ScriptedPolicyError(d.id, "open-loop replay does not insert the piece")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for d in demos:
        save_demo(d, out / d.id)
        paths.append(out / d.id)
    save_config(sim, out / SCENARIO_FILE)
    return paths


def load_demos(demo_dir, scenario: str | None = None) -> tuple[DemoSet, SimConfig]:
    """Demo set plus its scenario: ``scenario`` if given, else the saved one."""
    demos = load_demo_set(demo_dir)
    if scenario is not None:
        sim = resolve_scenario(scenario)
    elif (Path(demo_dir) / SCENARIO_FILE).is_file():
        sim = load_config(Path(demo_dir) / SCENARIO_FILE)
    else:
        raise FileNotFoundError(f"{demo_dir}: no {SCENARIO_FILE}; pass the scenario explicitly")
    return demos, sim


# -- training data -------------------------------------------------------------------

def selection_rows(trace: EpisodeTrace, run: int) -> list[tuple]:
    """One ``(features, label, meta)`` row per selection in a trace.

    The features are the followed demo's distances at selection time; the
    label says whether following it inserted its piece.
    """
    rows, current = [], None
    for e in trace.events:
        if e["event"] == "select":
            report = next(r for r in e["scores"] if r["demo_id"] == e["chosen"])
            vals = [report[k] for k in ("d_pq", "d_cq", "d_rp")]
            feats = None if any(isinstance(v, dict) for v in vals) else vals
            current = {"features": feats, "demo": e["chosen"], "inserted": False}
        elif e["event"] == "release" and current is not None and e["kind"] == current["demo"]:
            current["inserted"] = current["inserted"] or bool(e["inserted"])
        elif e["event"] == "segment" and current is not None:
            ok = e["outcome"] == Outcome.DEMO_COMPLETE.value and current["inserted"]
            rows.append((current["features"], int(ok),
                         {"run": run, "selection": len(rows), "demo_id": current["demo"]}))
            current = None
    return rows


def _dataset_run(index: int) -> list[tuple]:
    c = _CTX
    scene_seed, ep_seed = episode_seeds(c["master_seed"], index, "dataset")
    trace = run_episode(reset(c["sim"], scene_seed), c["demos"],
                        replace(c["servo"], strategy=Strategy.UNIFORM_RANDOM), c["sim"], ep_seed,
                        estimator=c["estimator"], log_steps=False, score_random=True)
    return selection_rows(trace, index)


def split_dataset(ds: Dataset, master_seed: int) -> tuple[Dataset, Dataset]:
    """Seeded 2:1 train/test split of the rows."""
    n = len(ds)
    perm = np.random.default_rng(np.random.SeedSequence([master_seed, _PURPOSE["split"]])).permutation(n)
    n_train = int(round(2 * n / 3))
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


def generate_dataset(sim: SimConfig, demos: DemoSet, n_runs: int = 150, master_seed: int = 0,
                     out_path=None, estimator: str = "oracle",
                     servo: ServoConfig | None = None) -> tuple[Dataset, Dataset]:
    """Run ``n_runs`` randomly-selecting episodes and collect one row per selection."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    ctx = {"sim": sim, "demos": demos, "master_seed": master_seed, "estimator_name": estimator,
           "servo": replace(servo or ServoConfig(), estimator=estimator)}
    rows = [r for run in _map_episodes(_dataset_run, n_runs, ctx) for r in run]
    train, test = split_dataset(Dataset.from_rows(rows), master_seed)
    if out_path is not None:
        save_dataset(out_path, train, test)
    return train, test


# -- result tables ----------------------------------------------------------------------

@dataclass(frozen=True)
class StrategyResult:
    strategy: str
    episodes: int
    first_object_successes: int
    all_objects_successes: int
    failures: dict

    def __post_init__(self):
        if not 0 <= self.first_object_successes <= self.episodes:
            raise ValueError("first-object successes out of range")
        if not 0 <= self.all_objects_successes <= self.episodes:
            raise ValueError("all-objects successes out of range")
        if set(self.failures) != set(FAILURE_LABELS):
            raise ValueError(f"failure histogram needs exactly {FAILURE_LABELS}")
        if sum(self.failures.values()) != self.episodes - self.all_objects_successes:
            raise ValueError("failure histogram must sum to the failure count")

    @property
    def first_object(self) -> float:
        return self.first_object_successes / self.episodes

    @property
    def all_objects(self) -> float:
        return self.all_objects_successes / self.episodes

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "episodes": self.episodes,
                "first_object_successes": self.first_object_successes,
                "all_objects_successes": self.all_objects_successes,
                "first_object": self.first_object, "all_objects": self.all_objects,
                "failures": {k: self.failures[k] for k in FAILURE_LABELS}}

    @classmethod
    def from_dict(cls, d: dict) -> StrategyResult:
        return cls(d["strategy"], int(d["episodes"]), int(d["first_object_successes"]),
                   int(d["all_objects_successes"]), {k: int(v) for k, v in d["failures"].items()})

    @classmethod
    def from_traces(cls, strategy: str, traces: list[EpisodeTrace]) -> StrategyResult:
        hist = dict.fromkeys(FAILURE_LABELS, 0)
        for t in traces:
            label = t.failure_label()
            if label is not None:
                hist[label] += 1
        return cls(strategy, len(traces), sum(t.first_success for t in traces),
                   sum(t.success for t in traces), hist)


@dataclass(frozen=True)
class ResultTable:
    rows: tuple[StrategyResult, ...]
    meta: dict = field(default_factory=dict)

    def row(self, strategy) -> StrategyResult:
        name = Strategy(strategy).value
        return next(r for r in self.rows if r.strategy == name)

    def to_dict(self) -> dict:
        return {"meta": self.meta, "rows": [r.to_dict() for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> ResultTable:
        d = json.loads(text)
        return cls(tuple(StrategyResult.from_dict(r) for r in d["rows"]), d.get("meta", {}))

    def to_text(self) -> str:
        head = (f"{'strategy':<15}{'episodes':>9}{'first object':>14}{'all objects':>13}"
                + "".join(f"{h:>15}" for h in FAILURE_LABELS))
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.strategy:<15}{r.episodes:>9}{100 * r.first_object:>13.1f}%"
                         f"{100 * r.all_objects:>12.1f}%"
                         + "".join(f"{r.failures[h]:>15}" for h in FAILURE_LABELS))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RecoveryTable:
    strategy: str
    drop_p: float
    episodes: int
    successes: dict  # recovery mode -> successful episodes
    drops: dict      # recovery mode -> injected drops over all episodes

    def rate(self, mode) -> float:
        return self.successes[Recovery(mode).value] / self.episodes

    def to_json(self) -> str:
        return json.dumps({"strategy": self.strategy, "drop_p": self.drop_p,
                           "episodes": self.episodes, "successes": self.successes,
                           "drops": self.drops,
                           "rates": {m: self.rate(m) for m in self.successes}},
                          indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> RecoveryTable:
        d = json.loads(text)
        return cls(d["strategy"], float(d["drop_p"]), int(d["episodes"]),
                   {k: int(v) for k, v in d["successes"].items()},
                   {k: int(v) for k, v in d["drops"].items()})

    def to_text(self) -> str:
        lines = [f"recovery with drop_p={self.drop_p:g}, {self.strategy} selection, "
                 f"{self.episodes} episodes",
                 f"{'mode':<10}{'success':>9}{'drops':>7}"]
        for m in self.successes:
            lines.append(f"{m:<10}{100 * self.rate(m):>8.1f}%{self.drops[m]:>7}")
        return "\n".join(lines) + "\n"


# -- evaluation --------------------------------------------------------------------------

def _eval_episode(index: int) -> list[tuple[str, str]]:
    c = _CTX
    scene_seed, ep_seed = episode_seeds(c["master_seed"], index, c["purpose"])
    state = reset(c["sim"], scene_seed)
    cache = EpisodeCache()  # shared by every run below: they start from the same scene
    out = []
    for strategy, recovery in c["runs"]:
        trace = run_episode(state, c["demos"], replace(c["servo"], strategy=strategy), c["sim"],
                            ep_seed, drop_p=c["drop_p"], recovery=recovery,
                            estimator=c["estimator"], model=c["model"], cache=cache,
                            log_steps=c["log_steps"])
        out.append(_trace_lines(index, trace))
    return out


def _run_grid(config: ExperimentConfig, sim: SimConfig, demos: DemoSet, model, runs,
              purpose: str, n: int) -> tuple[list[list[EpisodeTrace]], list[list[str]]]:
    """Traces and their JSONL text, indexed ``[run][episode]``, for each
    (strategy, recovery) pair in ``runs``."""
    ctx = {"sim": sim, "demos": demos, "model": model, "master_seed": config.master_seed,
           "estimator_name": config.estimator, "purpose": purpose, "runs": runs,
           "servo": replace(config.servo, estimator=config.estimator),
           "drop_p": config.drop_p, "log_steps": config.log_steps}
    per_episode = _map_episodes(_eval_episode, n, ctx)
    texts = [[ep[k] for ep in per_episode] for k in range(len(runs))]
    return [[EpisodeTrace.from_jsonl(t) for t in run] for run in texts], texts


def _write_traces(out: Path, name: str, texts: list[str]) -> None:
    (out / "traces").mkdir(parents=True, exist_ok=True)
    (out / "traces" / f"{name}.jsonl").write_text("".join(texts))


def _prepare(config: ExperimentConfig, demos: DemoSet | None, sim: SimConfig | None):
    sim = sim or config.sim()
    demos = demos if demos is not None else DemoSet(tuple(record_all(sim)))
    return sim, demos


def evaluate(config: ExperimentConfig, demos: DemoSet | None = None, model: MlpModel | None = None,
             sim: SimConfig | None = None) -> ResultTable:
    """Run every strategy on the same seeded scenes and tabulate success and failures.

    Writes ``results.json``, ``results.txt`` and one JSONL trace file per
    strategy when ``config.out_dir`` is set.
    """
    if Strategy.MLP in config.strategies and model is None:
        raise MissingModel("the Mlp strategy needs a trained model file")
    sim, demos = _prepare(config, demos, sim)
    n = config.episode_count(sim)
    runs = [(s, config.recovery) for s in config.strategies]
    traces, texts = _run_grid(config, sim, demos, model, runs, "eval", n)
    table = ResultTable(
        tuple(StrategyResult.from_traces(s.value, t) for s, t in zip(config.strategies, traces)),
        {"scenario": sim.name, "master_seed": config.master_seed, "episodes": n,
         "estimator": config.estimator, "drop_p": config.drop_p,
         "recovery": config.recovery.value})
    if config.out_dir is not None:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for s, t in zip(config.strategies, texts):
            _write_traces(out, s.value, t)
        (out / "results.json").write_text(table.to_json())
        (out / "results.txt").write_text(table.to_text())
    return table


def evaluate_recovery(config: ExperimentConfig, demos: DemoSet | None = None,
                      model: MlpModel | None = None, sim: SimConfig | None = None,
                      strategy: Strategy | str = Strategy.REPROJECTION) -> RecoveryTable:
    """Reselect against Retrack under injected drops, on identical seeds."""
    strategy = Strategy(strategy)
    if strategy == Strategy.MLP and model is None:
        raise MissingModel("the Mlp strategy needs a trained model file")
    sim, demos = _prepare(config, demos, sim)
    n = config.episode_count(sim)
    modes = (Recovery.RESELECT, Recovery.RETRACK)
    traces, texts = _run_grid(config, sim, demos, model, [(strategy, m) for m in modes],
                              "recovery", n)
    table = RecoveryTable(
        strategy.value, config.drop_p, n,
        {m.value: sum(t.success for t in ts) for m, ts in zip(modes, traces)},
        {m.value: sum(e["event"] == "drop" for t in ts for e in t.events)
         for m, ts in zip(modes, traces)})
    if config.out_dir is not None:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for m, t in zip(modes, texts):
            _write_traces(out, f"recovery_{m.value}", t)
        (out / "recovery.json").write_text(table.to_json())
        (out / "recovery.txt").write_text(table.to_text())
    return table
