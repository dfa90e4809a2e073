"""
A small active-learning comparison
==================================

Runs the five acquisition strategies and the upper-bound model on the
default phantom for two seeds and prints seed-averaged Dice curves.  The
full ten-seed benchmark is ``hybrid-al suite --config configs/benchmark.yaml``.
This script takes several minutes on one core.
"""

import sys
import tempfile

from hybrid_al.alloop import STRATEGIES, ExperimentConfig, Strategy, run_suite
from hybrid_al.model import TrainConfig
from hybrid_al.report import aggregate, curve, read_results

seeds = [int(s) for s in sys.argv[1:]] or [0, 1]
train = TrainConfig(lr=2e-3)
configs = [ExperimentConfig(strategy=Strategy(name), train=train, iterations=4) for name in STRATEGIES]

out = tempfile.mkdtemp(prefix="hybrid-al-demo-")
records = run_suite(configs, seeds, out, upper_bound=True)
print(len(records), "runs written to", out)

curves = aggregate(read_results(out)[0])
upper = curve(curves, "upper_bound")[0]
print(f"upper bound (all 25 volumes): {upper:.4f}")
for name in STRATEGIES:
    dsc = curve(curves, name)
    print(f"{name:>9s}: " + " ".join(f"{dsc[i]:.4f}" for i in sorted(dsc)))

# Which volumes did each strategy pick first?
for rec in records:
    if rec.config.seed == seeds[0] and rec.rows and rec.rows[0].selected:
        print(f"{rec.run_id:>28s}: " + ", ".join(str(r.selected[0]) for r in rec.rows))
