"""End-to-end fitting: preprocess, find the posterior mode, run the sampler."""

from __future__ import annotations

from dataclasses import dataclass

from .data import MultiOmicDataset, OutcomeSpec, NO_OUTCOME, preprocess
from .gibbs import PriorSpec, PosteriorSamples, run_sampler, default_iterations
from .unifac import (ModeDecomposition, PenaltySpec, RankSpec, default_penalties,
                     unifac_decompose)


@dataclass
class FitResult:
    dataset: MultiOmicDataset        # the (preprocessed) data the model saw
    mode: ModeDecomposition
    prior: PriorSpec
    penalties: PenaltySpec
    chain: PosteriorSamples


def fit(ds: MultiOmicDataset, outcome: OutcomeSpec = NO_OUTCOME, iters=None,
        burn_in=None, seed=0, scale=True, penalties: PenaltySpec | None = None,
        max_ranks: RankSpec | None = None, alpha0_sq=1000.0 ** 2, alpha_sq=1.0,
        a=1.0, b=1.0, prior: PriorSpec | None = None, progress=None) -> FitResult:
    """Center and scale (unless ``scale=False``), solve for the mode with the
    default penalties and sample from the posterior started at the mode.

    Prior variances on the factors are the reciprocal penalties unless an
    explicit ``prior`` is given.
    """
    work = preprocess(ds) if scale else ds
    if penalties is None:
        penalties = default_penalties(work.n, work.dims)
    mode = unifac_decompose(work, penalties, max_ranks=max_ranks)
    if prior is None:
        prior = PriorSpec.from_penalties(penalties, alpha0_sq=alpha0_sq,
                                         alpha_sq=alpha_sq, a=a, b=b)
    if iters is None or burn_in is None:
        d_it, d_burn = default_iterations(work, outcome)
        iters = d_it if iters is None else iters
        burn_in = d_burn if burn_in is None else burn_in
    chain = run_sampler(work, mode, prior, outcome, iters=iters, burn_in=burn_in,
                        seed=seed, progress=progress)
    return FitResult(work, mode, prior, penalties, chain)
