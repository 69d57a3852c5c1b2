"""
Where latent pathways pay off
=============================

Closed-form FLOPs and attention memory for the latent model versus a dense
causal decoder of the same width and depth.  The latent model carries a
fixed point-cloud extractor cost, so it only wins past a crossover length;
its attention-score cost per token tends to T_sc / (2 l_sub) of the dense
decoder's.
"""

from dataclasses import replace

from lanemesh.cost import crossover, sweep
from lanemesh.model import TOY_CONFIG

cfg = replace(TOY_CONFIG, M_max=4096)  # toy widths, capacity stretched to 262144 tokens
rows = sweep(cfg, [2 ** k for k in range(8, 19, 2)])

print(f"{'L':>8}{'lane GFLOP':>12}{'dense GFLOP':>13}{'lane MB':>10}{'dense MB':>11}{'score ratio':>13}")
for r in rows:
    print(f"{r.L:>8}{r.lane_flops / 1e9:>12.2f}{r.baseline_flops / 1e9:>13.2f}"
          f"{r.lane_mem / 2**20:>10.1f}{r.baseline_mem / 2**20:>11.1f}{r.score_ratio:>13.4f}")

print("crossover length:", crossover(cfg))
print("score-ratio limit T_sc/(2 l_sub) =", cfg.T_sc / (2 * cfg.l_sub))
