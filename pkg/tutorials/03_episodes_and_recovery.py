# %% [markdown]
# # Whole episodes, strategies and recovery
#
# An episode repeatedly selects a demonstration, servos along it frame by
# frame and consumes it once it finishes. Its trace records every
# selection, grasp, release and segment outcome.

# %%
import collections

from condserv.demomodel import DemoSet
from condserv.harness import ExperimentConfig, evaluate, evaluate_recovery
from condserv.servo import Recovery, ServoConfig, run_episode
from condserv.sim import preset, record_all, reset

sim = preset("standard3")
demos = DemoSet(tuple(record_all(sim)))

# %%
trace = run_episode(reset(sim, 11), demos, ServoConfig(strategy="Reprojection"), sim, rng=11,
                    log_steps=False)
print("selections:", trace.selections)
print("events:", collections.Counter(e["event"] for e in trace.events))
print("success:", trace.success, "first piece inserted:", trace.first_success, "steps:", trace.steps)

# %% [markdown]
# ## Comparing strategies on shared seeds
#
# `evaluate` runs every strategy from bit-identical starting scenes. The
# full comparison uses 300 episodes. A short run shows the table format.

# %%
table = evaluate(ExperimentConfig(episodes=12, strategies=("UniformRandom", "PointQuality",
                                                           "ColorQuality", "Reprojection"),
                                  log_steps=False), demos, sim=sim)
print(table.to_text())

# %% [markdown]
# ## Dropped pieces
#
# With probability p a held piece slips shortly after the grasp. Retrack
# keeps following the same demonstration. Reselect scores the remaining
# demonstrations again from the current view.

# %%
rec = evaluate_recovery(ExperimentConfig(episodes=12, drop_p=0.25, log_steps=False), demos, sim=sim)
print(rec.to_text())
for mode in Recovery:
    print(mode.value, f"{rec.rate(mode.value):.0%}")
