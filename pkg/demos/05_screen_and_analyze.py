"""End-to-end pipeline: screen correlated predictors, then analyze.

Mimics a daily-followup study: a handful of subjects, many observations
each, and a block of predictors too correlated to use together.  The
same steps are available from the shell:

    outputation screen  --input data.csv --outcome y --cluster id \
        --covariates f0,f1,f2,f3,f4,f5 --threshold 0.5 --output screen.json
    outputation analyze --input data.csv --outcome y --cluster id \
        --covariates <retained> --add-intercept --b 2 --outputations 5000 \
        --corr independence --seed 1 --output report.json
"""

import numpy as np

from outputation import (
    OutputationPlan,
    fit_gee,
    mo_inference,
    run_outputations,
    screen_predictors,
    validate_min_cluster_size,
)
from outputation.data import ClusteredDataset

rng = np.random.default_rng(42)
n, m, q = 16, 60, 6

# three independent signals, each echoed by a noisy twin -> pairwise
# correlations far above 0.5 inside each pair
base = rng.normal(size=(n, m, 3))
feats = np.concatenate([base, base + 0.3 * rng.normal(size=(n, m, 3))], axis=2)
b = rng.normal(scale=0.8, size=n)
y = 1.5 + 0.6 * feats[:, :, 0] - 0.4 * feats[:, :, 1] \
    + b[:, None] + rng.normal(size=(n, m))

names = tuple(f"f{j}" for j in range(q))
X = np.column_stack([np.ones(n * m), feats.reshape(n * m, q)])
data = ClusteredDataset.from_arrays(y.ravel(), X,
                                    np.repeat(np.arange(n), m),
                                    columns=("intercept",) + names,
                                    intercept=True)

# --- screening at the 0.5 threshold drops one of each echo pair
screen = screen_predictors(data, threshold=0.5)
print("retained predictors:", screen.retained)
for name, r in screen.dropped:
    print(f"dropped {name}: max |r| at drop time = {r:.3f}")

keep = [0] + [1 + names.index(c) for c in screen.retained]
data = ClusteredDataset(y=data.y, X=data.X[:, keep], sizes=data.sizes,
                        ids=data.ids,
                        columns=tuple(data.columns[j] for j in keep),
                        intercept=True)

# --- every cluster must supply B observations
B = 2
data = validate_min_cluster_size(data, B, policy="drop")

# --- subsample-and-average analysis plus the full-data GEE reference
acc = run_outputations(data, OutputationPlan(B=B, M=2000, master_seed=1),
                       workers=4)
inf = mo_inference(acc, B, data.sizes)
gee = fit_gee(data, "independence")

print(f"\n{'':<12}{'estimate':>10}{'stab var':>12}{'z':>8}"
      f"{'gee est':>10}{'gee var':>12}")
for j, name in enumerate(data.columns):
    print(f"{name:<12}{inf.beta_bar[j]:>10.3f}"
          f"{inf.var_stabilized[j, j]:>12.2e}{inf.z[j]:>8.2f}"
          f"{gee.beta[j]:>10.3f}{gee.sigma[j, j]:>12.2e}")
