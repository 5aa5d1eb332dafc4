"""Synthetic newsvendor data and the baseline prescriptions evaluated on it.

Run: python3 demos/02_baselines.py
"""
from dataclasses import replace

from ippo import datagen
from ippo.prescriptors import (
    evaluate_rule, feature_based_fit, knn, perfect_foresight, point_estimate, saa,
)
from ippo.regression import ols_fit

cfg = datagen.GenConfig(problem="newsvendor", n=120, d_x=2, d_l=2, seed=7)
sigma = datagen.calibrate_sigma(0.34, cfg)
data, inst, meta = datagen.generate(replace(cfg, noise_sigma=sigma))
print(f"noise sigma {sigma:.2f} gives measured R2 {meta['r2_measured']:.3f}")
(tr, ti), _, (te, tei) = datagen.split(data, inst, datagen.SplitSpec())

rule = feature_based_fit(tr, ti, backend="highs")
results = {
    "perfect foresight": perfect_foresight(te, tei, "highs"),
    "OLS point estimate": point_estimate(ols_fit(tr.features, tr.responses), te, tei, "highs"),
    "SAA": saa(tr, ti, te, tei, "highs"),
    "kNN, k=12": knn(tr, ti, te, tei, 12, "highs"),
    "linear decision rule": evaluate_rule(rule, te, tei),
}
for name, r in results.items():
    print(f"{name:22s} mean test cost {r.mean_cost:10.2f}")
