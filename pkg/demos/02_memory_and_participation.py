"""Who can train what: per-step memory against a pool of device budgets.

Builds the benchmark model, estimates the training footprint of the full
model and of every progressive step, and counts how many devices of a
randomly budgeted pool could join each one.
"""
from pathlib import Path

import numpy as np

from profl.blocks import BlockState, GlobalModel, assemble_growing, assemble_shrinking
from profl.config import load_config
from profl.memory import estimate

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "benchmark.ini"
cfg = load_config(CONFIG)
batch = cfg.batch_size

model = GlobalModel(cfg.dims, cfg.hidden, cfg.classes, cfg.T, np.random.default_rng(0))
for t in range(2, cfg.T + 1):
    model.basic[t] = model.new_basic_layer(t)  # stand-ins for distilled layers
print("block layer counts:", model.plan.layer_counts)

#-----------------------------------------------------------------------------
# Footprints
#-----------------------------------------------------------------------------

steps = {"full model": model.full_submodel()}
for t in range(cfg.T, 1, -1):
    steps[f"shrinking {t}"] = assemble_shrinking(model, t)
model.states = [BlockState.UNTRAINED] * cfg.T
for t in range(1, cfg.T + 1):
    steps[f"growing {t}"] = assemble_growing(model, t)
    model.set_state(t, BlockState.WELL_TRAINED)

full = estimate(steps["full model"], batch).bytes
budgets = np.random.default_rng(1).uniform(cfg.budget_low, cfg.budget_high, cfg.devices) * full

print(f"\n{'sub-model':<14}{'bytes':>9}{'cached':>9}{'devices':>9}")
for name, sub in steps.items():
    plain = estimate(sub, batch).bytes
    cached = estimate(sub, batch, cache_frozen=True).bytes
    print(f"{name:<14}{plain:>9}{cached:>9}{int(np.sum(budgets >= plain)):>9}")
