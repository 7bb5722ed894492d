"""Remove 10% of entries and a block of whole sample columns, then compare
posterior-mean imputation with mean and iterative-SVD imputation.

    python demos/impute_missing.py
"""
import numpy as np

from bsfp import credible_intervals, coverage, fit, rse
from bsfp.sim import generate_factorization_data, inject_missingness, mean_impute, svd_impute

ds, _, _ = generate_factorization_data([80, 80], 60, (3, [3, 3]), seed=2, s2n_x=9.0)

for pattern, kw in [("entrywise", dict(fraction=0.1)), ("blockwise", dict(count=6))]:
    masked, rec = inject_missingness(ds, pattern, seed=5, **kw)
    res = fit(masked, iters=1500, burn_in=750, seed=3)
    chain, work = res.chain, res.dataset
    out = {"posterior mean": [], "mean": [], "svd per source": [], "svd combined": []}
    cov = []
    fills = {"mean": mean_impute(masked), "svd per source": svd_impute(masked, 6),
             "svd combined": svd_impute(masked, 6, combined=True)}
    for s in range(ds.q):
        m, truth = rec.masks[s], rec.removed[s]
        rows = np.nonzero(m)[0]
        draws = chain.imputed_X[s][chain.burn_in:] * work.scaling.noise_sd[s] \
            + work.scaling.row_means[s][rows]
        tab = credible_intervals(draws)
        out["posterior mean"].append(rse(truth, tab.mean))
        cov.append(coverage(tab, truth))
        for name, filled in fills.items():
            out[name].append(rse(truth, filled[s][m]))
    print(f"{pattern}: " + ", ".join(f"{k} RSE {np.mean(v):.3f}" for k, v in out.items())
          + f"; 95% interval coverage {np.mean(cov):.3f}")
