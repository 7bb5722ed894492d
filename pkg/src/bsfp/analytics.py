"""Posterior summaries: credible intervals, RSE, coverage, variance explained,
outcome prediction and co-clustering stability."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .data import MultiOmicDataset


@dataclass
class SummaryTable:
    """Elementwise posterior summaries; every field has the shape of one draw."""

    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float = 0.95

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def rows(self):
        """Long-format ``(index, mean, sd, lower, upper)`` tuples."""
        for idx in np.ndindex(self.mean.shape):
            yield idx, self.mean[idx], self.sd[idx], self.lower[idx], self.upper[idx]


def rse(truth, estimate) -> float:
    """Relative squared error ``||S - S_hat||^2 / ||S||^2``."""
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if truth.shape != estimate.shape:
        raise ValueError("truth and estimate shapes differ")
    denom = float(np.sum(truth ** 2))
    if denom == 0:
        raise ValueError("truth has zero norm")
    return float(np.sum((truth - estimate) ** 2)) / denom


def credible_intervals(draws, level=0.95) -> SummaryTable:
    """Equal-tailed intervals over the leading (iteration) axis using linearly
    interpolated empirical quantiles."""
    draws = np.asarray(draws, dtype=float)
    if draws.shape[0] < 1:
        raise ValueError("need at least one draw")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    a = (1 - level) / 2
    lo, hi = np.quantile(draws, [a, 1 - a], axis=0, method="linear")
    sd = draws.std(axis=0, ddof=1) if draws.shape[0] > 1 else np.zeros(draws.shape[1:])
    return SummaryTable(draws.mean(axis=0), sd, lo, hi, level)


def coverage(intervals, truth) -> float:
    """Fraction of truths inside closed intervals (``SummaryTable`` or a
    ``(lower, upper)`` pair)."""
    lo, hi = _bounds(intervals)
    truth = np.asarray(truth, dtype=float)
    if truth.shape != lo.shape:
        raise ValueError("truth shape does not match intervals")
    if truth.size == 0:
        return float("nan")
    return float(np.mean((truth >= lo) & (truth <= hi)))


def ci_width(intervals) -> float:
    lo, hi = _bounds(intervals)
    return float(np.mean(hi - lo)) if lo.size else float("nan")


def _bounds(intervals):
    if isinstance(intervals, SummaryTable):
        return np.asarray(intervals.lower), np.asarray(intervals.upper)
    lo, hi = intervals
    return np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)


# ------------------------------------------------------------ structure draws

def structure_draws(samples, s, which="joint"):
    """Stack ``J_s`` (or ``A_s``) over the retained iterations."""
    its = list(samples.kept)
    f = samples.joint if which == "joint" else samples.indiv
    if which not in ("joint", "indiv"):
        raise ValueError("which must be 'joint' or 'indiv'")
    return np.stack([f(t, s) for t in its]) if its else np.empty((0,))


def linear_predictor_draws(samples):
    if samples.beta is None:
        raise ValueError("chain has no outcome model")
    return np.stack([samples.linear_predictor(t) for t in samples.kept])


def _raw_and_iterations(samples):
    """Source chain plus the raw iteration index of each retained draw."""
    raw = getattr(samples, "raw", None)
    if raw is None:
        return samples, np.asarray(list(samples.kept))
    return raw, np.asarray(samples.iterations)


def variance_explained(samples, ds: MultiOmicDataset, which="joint", level=0.95):
    """Per-source share of the observed data's squared norm captured by the
    joint (or individual) structure, summarised over retained iterations.

    ``which="outcome"`` instead returns, per block (joint, then each
    individual), the ratio of ``Var(V_block beta_block)`` to the variance of
    the working response (outcome with current imputations, or the latent
    ``z`` for a binary outcome).
    """
    if which == "outcome":
        return _outcome_variance_explained(samples, level)
    if which not in ("joint", "indiv"):
        raise ValueError("which must be 'joint', 'indiv' or 'outcome'")
    out = []
    for s, x in enumerate(ds.sources):
        obs = ~np.isnan(x)
        denom = float(np.sum(x[obs] ** 2))
        if denom == 0:
            raise ValueError(f"source {s} has zero norm")
        f = samples.joint if which == "joint" else samples.indiv
        vals = np.array([np.sum(f(t, s)[obs] ** 2) / denom for t in samples.kept])
        out.append(credible_intervals(vals, level))
    return out


def _outcome_variance_explained(samples, level):
    if samples.beta is None:
        raise ValueError("chain has no outcome model")
    raw, its = _raw_and_iterations(samples)
    r = samples.ranks.joint
    sizes = [r] + list(samples.ranks.indiv)
    ratios = np.empty((len(its), len(sizes)))
    for i, t in enumerate(samples.kept):
        resp = _working_response(raw, its[i])
        denom = np.var(resp)
        start = 1
        scores = [samples.V[t]] + [v[t] for v in samples.Vs]
        for b, (k, sc) in enumerate(zip(sizes, scores)):
            part = sc @ samples.beta[t, start:start + k]
            ratios[i, b] = np.var(part) / denom if denom > 0 else np.nan
            start += k
    return [credible_intervals(ratios[:, b], level) for b in range(len(sizes))]


def _working_response(raw, t):
    if raw.outcome_kind == "binary":
        return raw.z[t]
    y = raw.y_values.copy()
    y[raw.y_mask] = raw.imputed_y[t]
    return y


def posterior_predict_y(samples, targets=None, level=0.95, seed=0):
    """Posterior of ``E(y_i | X)`` and predictive draws of ``y_i``.

    Returns ``(expected, predictive)`` SummaryTables over ``targets``; for a
    binary outcome the expectation is ``Phi(V* beta)`` and predictive draws
    are Bernoulli.
    """
    if samples.beta is None:
        raise ValueError("chain has no outcome model")
    n = samples.n
    targets = np.arange(n) if targets is None else np.asarray(targets, dtype=int)
    if targets.size and (targets.min() < 0 or targets.max() >= n):
        raise IndexError("target index out of range")
    raw, its = _raw_and_iterations(samples)
    eta = linear_predictor_draws(samples)[:, targets]
    rng = np.random.default_rng(seed)
    if raw.outcome_kind == "binary":
        mean = ndtr(eta)
        pred = (rng.random(mean.shape) < mean).astype(float)
    else:
        mean = eta
        sd = np.sqrt(raw.tau_sq[its])[:, None]
        pred = mean + sd * rng.standard_normal(mean.shape)
    return credible_intervals(mean, level), credible_intervals(pred, level)


def cluster_stability(samples, k, seed=0, n_init=20, max_iter=100, thin=1):
    """Co-clustering frequency of samples under k-means on the columns of the
    stacked joint structure, over retained iterations."""
    from sklearn.cluster import KMeans

    n = samples.n
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= n")
    its = list(samples.kept)[::thin]
    freq = np.zeros((n, n))
    for t in its:
        if k == 1:
            labels = np.zeros(n, dtype=int)
        else:
            pts = samples.joint_stacked(t).T
            km = KMeans(k, init="k-means++", n_init=n_init, max_iter=max_iter,
                        algorithm="lloyd", random_state=seed)
            labels = km.fit_predict(pts)
        freq += labels[:, None] == labels[None, :]
    return freq / len(its)
