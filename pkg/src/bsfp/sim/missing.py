"""Missingness injection and single-imputation baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import MultiOmicDataset, OutcomeSpec

PATTERNS = ("none", "entrywise", "blockwise", "mnar")


@dataclass
class MissingRecord:
    """Masks and the true values that were removed (one entry per source)."""

    masks: list[np.ndarray]
    removed: list[np.ndarray]

    def restore(self, ds: MultiOmicDataset) -> MultiOmicDataset:
        out = []
        for x, m, v in zip(ds.sources, self.masks, self.removed):
            x = x.copy()
            x[m] = v
            out.append(x)
        return ds.with_sources(out)


def _count(fraction, count, total):
    if count is not None:
        return int(count)
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    return int(round(fraction * total))


def inject_missingness(ds: MultiOmicDataset, pattern, fraction=None, count=None,
                       seed=0):
    """Mask entries of every source.

    ``entrywise``: ``round(f p_s n)`` uniformly chosen entries per source.
    ``blockwise``: ``round(f n)`` (or ``count``) whole columns per source,
    disjoint across sources.  ``mnar``: the ``round(f p_s n)`` lowest-valued
    observed entries of each source.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if pattern not in PATTERNS:
        raise ValueError(f"unknown missingness pattern {pattern!r}")
    n = ds.n
    masks = [np.zeros(x.shape, dtype=bool) for x in ds.sources]
    if pattern == "entrywise":
        for s, x in enumerate(ds.sources):
            k = _count(fraction, count, x.size)
            masks[s].flat[rng.choice(x.size, k, replace=False)] = True
    elif pattern == "mnar":
        for s, x in enumerate(ds.sources):
            k = _count(fraction, count, x.size)
            flat = np.where(np.isnan(x), np.inf, x).ravel()
            masks[s].flat[np.argsort(flat, kind="stable")[:k]] = True
    elif pattern == "blockwise":
        k = _count(fraction, count, n)
        if k * ds.q > n:
            raise ValueError(f"cannot remove {k} disjoint columns from each of "
                             f"{ds.q} sources with n = {n}")
        cols = rng.permutation(n)[:k * ds.q].reshape(ds.q, k)
        for s in range(ds.q):
            masks[s][:, cols[s]] = True
    removed = [x[m].copy() for x, m in zip(ds.sources, masks)]
    out = [np.where(m, np.nan, x) for x, m in zip(ds.sources, masks)]
    return ds.with_sources(out), MissingRecord(masks, removed)


def mask_outcome(outcome: OutcomeSpec, fraction, seed=0):
    """Hide ``round(f n)`` uniformly chosen outcome values."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = _count(fraction, None, outcome.n)
    idx = rng.choice(outcome.n, k, replace=False)
    y = outcome.values.copy()
    y[idx] = np.nan
    return OutcomeSpec(outcome.kind, y), np.sort(idx)


# ------------------------------------------------------------------ baselines

def mean_impute(ds: MultiOmicDataset) -> list[np.ndarray]:
    """Fill each missing entry with its feature's observed mean (0 if the row
    is entirely missing)."""
    out = []
    for x in ds.sources:
        obs = ~np.isnan(x)
        cnt = obs.sum(axis=1)
        mu = np.divide(np.where(obs, x, 0.0).sum(axis=1), cnt,
                       out=np.zeros(x.shape[0]), where=cnt > 0)
        out.append(np.where(obs, x, mu[:, None]))
    return out


def _svd_impute_one(x, k, tol, max_iter):
    miss = np.isnan(x)
    if k > min(x.shape):
        raise ValueError(f"rank {k} exceeds min{x.shape}")
    Z = mean_impute(MultiOmicDataset([x]))[0] if x.shape[1] >= 2 else np.nan_to_num(x)
    trace = []
    if not miss.any():
        return Z, trace
    obs = ~miss
    for _ in range(max_iter):
        u, s, vt = np.linalg.svd(Z, full_matrices=False)
        L = (u[:, :k] * s[:k]) @ vt[:k]
        trace.append(float(np.sum((x[obs] - L[obs]) ** 2)))
        Znew = np.where(miss, L, x)
        change = np.linalg.norm(Znew - Z) / max(np.linalg.norm(Z), 1e-300)
        Z = Znew
        if change < tol:
            break
    return Z, trace


def svd_impute(ds: MultiOmicDataset, k=4, tol=1e-6, max_iter=500, combined=False,
               return_trace=False):
    """Iterative rank-``k`` SVD imputation, per source or on the stacked
    sources.  Missing entries start at row means and are replaced by the
    rank-``k`` reconstruction until the relative change is below ``tol``."""
    if combined:
        Z, trace = _svd_impute_one(np.vstack(ds.sources), k, tol, max_iter)
        out = np.split(Z, np.cumsum(ds.dims)[:-1], axis=0)
        traces = [trace]
    else:
        res = [_svd_impute_one(x, k, tol, max_iter) for x in ds.sources]
        out = [r[0] for r in res]
        traces = [r[1] for r in res]
    return (out, traces) if return_trace else out
