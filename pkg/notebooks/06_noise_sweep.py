"""
How many points does the data ask for?
======================================

A small version of the synthetic sweep over observation noise.  Each
adaptive run is paired with a fixed-size baseline at the same size.  At
this size the trend in E is dominated by seed-to-seed spread; the
acceptance suite runs the full sweep (N=300, K=60, 3 seeds per level).
"""

# %%
import numpy as np

from ppgp.experiment import run_experiment

config = {
    "seed": 0,
    "data": {"synth": {"condition": "noise", "N": 150}},
    "model": {"num_candidates": 40},
    "prior": {"alpha": 0.05},
    "train": {"n_pre": 100, "n_ppp": 300, "n_post": 100, "extraction": "top", "record_time": False},
    "baselines": {"matched": True},
    "sweep": {"intensities": [0.05, 0.3, 1.0], "seeds": 2},
}
records = run_experiment(config)

# %%
for r in records:
    print(f"{r['kind']:9s} sigma={r['intensity']:<5} seed={r['seed']}  M={r['M']:3d}  "
          f"E={r['expected_M']:6.2f}  gap={r['posterior_gap']:7.3f}")

for sigma in config["sweep"]["intensities"]:
    E = [r["expected_M"] for r in records if r["kind"] == "adaptive" and r["intensity"] == sigma]
    print(f"sigma {sigma}: median E = {np.median(E):.2f}")
