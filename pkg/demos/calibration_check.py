"""A small simulation-based calibration run: truths drawn from the prior,
one chain per replicate, and the share of 95% intervals covering the truth.

    python demos/calibration_check.py [replications]
"""
import sys

from bsfp.sim import preset, run_study
from bsfp.sim.studies import default_workers

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 10
cfg = preset("validation-desk-continuous").with_(replications=reps,
                                                 workers=default_workers())
report = run_study(cfg)
for name in ("J_coverage", "A_coverage", "Ey_coverage", "tau_sq_coverage"):
    print(f"{name}: {report.metric(name):.3f}")
