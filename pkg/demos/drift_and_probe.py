"""Baseline versus dual anchoring on held-out worlds, by trajectory length, plus the retro probe.

Trains six policies (two configurations, three seeds); expect roughly 20 minutes on one core.
"""
from dualanchor.experiment import build_split, drift_experiment, probe_accuracy
from dualanchor.trainer import TrainingConfig

train = build_split(40, 10, 100, "tr")
heldout = build_split(10, 10, 200, "ho")
out = drift_experiment(train, heldout, seeds=(0, 1, 2), base=TrainingConfig(epochs=4), log=print)

print(f"\nmean SR  dual {out.mean_sr('dual'):.1f}  baseline {out.mean_sr('baseline'):.1f}")
for s in out.seeds:
    g = out.gaps(s)
    print(f"seed {s}: SR gap Short {g['Short']:+.1f}  Medium {g['Medium']:+.1f}  Long {g['Long']:+.1f}")

for name in ("dual", "baseline"):
    r = probe_accuracy(out.runs[(name, 0)].policy, heldout.records, heldout.plans)
    print(f"retro probe {name}: {100 * r.accuracy:.1f}% of {r.n} steps (window chance {100 * r.chance:.1f}%)")
