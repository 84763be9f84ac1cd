"""
Where the parameters go
=======================

Per-component counts for the full-size presets, and recurrent baselines sized
to the same budget.
"""

from avmult.baselines import BaselineConfig, solve_hidden
from avmult.mult import build, parameter_breakdown, preset

for name, overrides in [("base", {}), ("large", {}), ("large", {"fusion": "project"})]:
    config = preset(name, **overrides)
    parts = parameter_breakdown(build(config, seed=None))  # abstract model: shapes only, no memory
    total = sum(parts.values())
    print(f"{name} ({config.fusion}): {total:,}")
    for part, n in parts.items():
        print(f"    {part:<12} {n:>12,}  {n / total:6.1%}")

# %%
# With concatenation the self stack runs at 2 * d_model and dominates the
# count.  The GRU baselines get whatever hidden size lands nearest 38.3M.
for kind in ("ef_gru", "lf_gru"):
    solved, n = solve_hidden(BaselineConfig(kind=kind, audio_dim=512, visual_dim=17, n_out=6))
    print(f"{kind}: layers={solved.layers} hidden={solved.hidden} -> {n:,}")
