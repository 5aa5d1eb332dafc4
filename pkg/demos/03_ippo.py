"""Fit regression coefficients for the decisions they induce, not for accuracy.

Run: python3 demos/03_ippo.py
"""
from dataclasses import replace

from ippo import datagen
from ippo.bilevel import RegConfig, SolveOptions, solve_ippo
from ippo.experiment import tune_lambda1
from ippo.prescriptors import point_estimate, saa
from ippo.regression import ols_fit

cfg = datagen.GenConfig(problem="newsvendor", n=120, d_x=2, d_l=2, seed=3)
cfg = replace(cfg, noise_sigma=datagen.calibrate_sigma(0.2, cfg))
data, inst, _ = datagen.generate(cfg)
(tr, ti), (va, vi), (te, tei) = datagen.split(data, inst, datagen.SplitSpec())

opts = SolveOptions(node_limit=10, lp_backend="highs")
sol = solve_ippo(tr, ti, opts=opts)
print(f"IPPO status {sol.status}, train cost {sol.objective:.1f}, "
      f"{sol.stats['pairs']} complementarity pairs, {sol.stats['nodes']} nodes")
ols = ols_fit(tr.features, tr.responses)
print("OLS coefficients\n", ols.beta.round(2))
print("IPPO coefficients\n", sol.beta.beta.round(2))

# Blend in the absolute prediction loss and let validation pick the weight.
lam, table = tune_lambda1(tr, ti, va, vi, (0.0, 0.5, 1.0), opts)
for row in table:
    print(f"  lambda1={row['lambda1']:.1f}  train {row['train_cost']:.1f}  valid {row['valid_cost']:.1f}")
tuned = solve_ippo(tr, ti, RegConfig.weighted(lam), opts)

for name, cost in (("OLS", point_estimate(ols, te, tei, "highs").mean_cost),
                   ("SAA", saa(tr, ti, te, tei, "highs").mean_cost),
                   (f"IPPO lambda1={lam}", point_estimate(tuned.beta, te, tei, "highs").mean_cost)):
    print(f"{name:18s} test cost {cost:.1f}")
