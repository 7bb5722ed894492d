"""Bayesian simultaneous factorization (and prediction) for multi-source data."""

from .data import (DataError, MultiOmicDataset, OutcomeSpec, NO_OUTCOME, ScalingMeta,
                   center_rows, estimate_noise_sd, load_dataset, preprocess,
                   scale_to_unit_error)
from .unifac import (ModeDecomposition, PenaltySpec, RankSpec, default_penalties,
                     nn_objective, l2_objective, soft_threshold_svd, unifac_decompose)
from .gibbs import (DecompositionState, NumericalError, PosteriorSamples, PriorSpec,
                    gibbs_sweep, run_sampler)
from .align import AlignedSamples, align_chain, greedy_match, varimax
from .analytics import (SummaryTable, cluster_stability, coverage, credible_intervals,
                        posterior_predict_y, rse, variance_explained)
from .pipeline import FitResult, fit

__version__ = "0.1.0"
