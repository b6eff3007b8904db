# %% [markdown]
# # The learned distance
#
# The three hand-made distances are combined by a small classifier that
# predicts whether following a demonstration will insert its piece. Its
# training rows come from episodes that pick demonstrations uniformly at
# random while still scoring every candidate.

# %%
from condserv.demomodel import DemoSet
from condserv.harness import generate_dataset
from condserv.mlp import TrainConfig, accuracy, train
from condserv.scoring import mlp_distance, score_all
from condserv.flow import OracleFlow
from condserv.sim import preset, record_all, render, reset

sim = preset("standard3")
demos = DemoSet(tuple(record_all(sim)))

# %% [markdown]
# A short collection keeps this quick. The acceptance run uses 150 runs.

# %%
train_set, test_set = generate_dataset(sim, demos, n_runs=12, master_seed=0)
print("rows:", len(train_set), "train,", len(test_set), "test;",
      "success fraction", round(float(train_set.labels.mean()), 2))
model, losses = train(train_set, TrainConfig(iterations=500))
print(f"loss {losses[0]:.3f} -> {losses[-1]:.3f}; train accuracy {accuracy(model, train_set):.2f}")

# %% [markdown]
# The learned distance is one minus the predicted success probability.

# %%
for r in score_all(render(reset(sim, 5), sim), demos, OracleFlow(sim), model):
    print(f"{r.demo_id:10s} learned distance {r.d_mlp:.3f}")
