"""Data generators, missingness, baselines and simulation studies."""

from .generate import SimTruth, apply_s2n, generate_factorization_data, s2n_scale
from .missing import (MissingRecord, inject_missingness, mask_outcome, mean_impute,
                      svd_impute)
from .studies import (PRESETS, StudyConfig, StudyReport, noise_only_ranks, preset,
                      run_comparison_study, run_imputation_study, run_study,
                      run_validation_study)
