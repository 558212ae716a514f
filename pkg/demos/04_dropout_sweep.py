"""Sweep the dropout rate on the small-data preset, at both dropout levels.

Runs 2 levels x 3 rates = 6 trainings of 2000 steps each, about ten seconds
each on one core. The output is the same table that
`moec sweep` writes to sweep.csv.
"""

from moec.simulator import preset, sweep

spec, cfg = preset("overfit", seed=0)
rows = sweep(
    spec, cfg, "dropout-rate", [0.25, 0.5, 0.75],
    variants={"cluster": {"dropout_level": "cluster"}, "global": {"dropout_level": "global"}},
)
print(f"{'rate':>5} {'level':>8} {'best val':>9} {'@step':>6} {'final val':>9}")
for r in rows:
    print(f"{r.value:5.2f} {r.variant:>8} {r.best_val:9.4f} {r.best_step:6d} {r.final_val:9.4f}")
