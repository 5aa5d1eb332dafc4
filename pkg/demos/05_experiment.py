"""A small replicated experiment, its summary table and an audit of the stored decisions.

Run: python3 demos/05_experiment.py [output_dir]
"""
import sys
import tempfile

from ippo.experiment import ExperimentConfig, audit, mean_by, performance_metric, read_results, run_experiment

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="ippo_demo_")
cfg = ExperimentConfig(problem="newsvendor", replications=2, r2_ladder=(0.2, 0.76),
                       methods=("perfect", "point_estimate", "saa", "knn", "feature_based", "ippo"),
                       lambda1_grid=(0.5, 1.0), output_dir=out)
res = run_experiment(cfg)
rows = [r for r in read_results(res.results) if r["split"] == "test"]
means = mean_by(rows, "r2_target", "method")
for (r2, m), v in means.items():
    print(f"R2 {float(r2):.2f}  {m:15s} {v:10.1f}")
for r2 in sorted({k[0] for k in means}):
    pm = performance_metric(means[(r2, "feature_based")], means[(r2, "ippo")], means[(r2, "perfect")])
    print(f"R2 {float(r2):.2f}  performance metric {pm}")
print("audit", {k: v for k, v in audit(out).items() if k != "mismatches"})
print("results and plots in", out)
