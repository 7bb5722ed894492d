"""Post-hoc resolution of rotation, permutation and sign ambiguity in the
factor samples: varimax-rotate each loading block (with its regression
coefficients appended as an extra row), then greedily match columns to a
pivot sample chosen by median condition number.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gibbs import ChainView, PosteriorSamples


@dataclass
class AlignedSamples(ChainView):
    V: np.ndarray
    U: list[np.ndarray]
    Vs: list[np.ndarray]
    W: list[np.ndarray]
    beta: np.ndarray | None
    iterations: np.ndarray                 # positions in the source chain
    pivot_index: dict = field(default_factory=dict)
    permutations: dict = field(default_factory=dict)
    signs: dict = field(default_factory=dict)
    rotations: dict = field(default_factory=dict)
    raw: PosteriorSamples | None = field(default=None, repr=False)

    @property
    def kept(self) -> range:
        return range(len(self))

    def audit(self) -> dict:
        return {
            "iterations": self.iterations.tolist(),
            "pivot_index": {k: int(v) for k, v in self.pivot_index.items()},
            "permutations": {k: v.tolist() for k, v in self.permutations.items()},
            "signs": {k: v.tolist() for k, v in self.signs.items()},
        }


def stack_loadings_with_beta(loadings, beta_block=None):
    """Append the coefficient block as an extra bottom row of the loadings."""
    loadings = np.asarray(loadings, dtype=float)
    if beta_block is None:
        return loadings.copy()
    return np.vstack([loadings, np.asarray(beta_block, dtype=float)[None, :]])


def split_augmented(aug, with_beta):
    if not with_beta:
        return aug, None
    return aug[:-1], aug[-1]


def varimax_criterion(L) -> float:
    L2 = np.asarray(L) ** 2
    return float(np.sum(np.var(L2, axis=0)))


def varimax(L, tol=1e-8, max_iter=1000):
    """Raw varimax rotation (no Kaiser normalisation).

    Returns ``(L @ R, R)`` with ``R`` orthogonal.
    """
    L = np.asarray(L, dtype=float)
    rot, R = varimax_batch(L[None], tol, max_iter)
    return rot[0], R[0]


def varimax_batch(Ls, tol=1e-8, max_iter=1000):
    """Varimax for a stack of equally shaped loading matrices ``(T, p, k)``.

    Each matrix follows the SVD-based fixed-point iteration on its own and
    stops once its criterion gains less than a relative ``tol``.
    """
    Ls = np.asarray(Ls, dtype=float)
    T, p, k = Ls.shape
    R = np.broadcast_to(np.eye(k), (T, k, k)).copy()
    if k <= 1:
        return Ls.copy(), R
    crit = np.zeros(T)
    active = np.flatnonzero(np.any(Ls != 0, axis=(1, 2)))
    for _ in range(max_iter):
        if active.size == 0:
            break
        L = Ls[active]
        LR = L @ R[active]
        LR2 = LR * LR
        G = LR * (LR2 - LR2.sum(axis=1, keepdims=True) / p)
        u, sv, vt = np.linalg.svd(np.swapaxes(L, 1, 2) @ G)
        R[active] = u @ vt
        new = sv.sum(axis=1)
        old = crit[active]
        crit[active] = new
        active = active[~((old != 0) & (new < old * (1 + tol)))]
    return Ls @ R, R


def condition_number(M) -> float:
    s = np.linalg.svd(M, compute_uv=False)
    if s[-1] == 0:
        return np.inf
    return float(s[0] / s[-1])


def choose_pivot(loadings_list) -> int:
    """Index of the sample with the median condition number (lower middle for
    an even count; lowest index among ties)."""
    conds = np.array([condition_number(L) for L in loadings_list])
    med = np.sort(conds)[(len(conds) - 1) // 2]
    return int(np.flatnonzero(conds == med)[0])


def greedy_match(sample, pivot):
    """Match sample columns to signed pivot columns.

    Columns are visited in decreasing norm order; each takes the unused pivot
    column (under either sign) with the smallest L2 distance.  Returns
    ``(perm, signs)`` such that ``sample[:, perm] * signs`` lines up with the
    pivot.
    """
    sample = np.asarray(sample, dtype=float)
    pivot = np.asarray(pivot, dtype=float)
    if sample.shape[1] != pivot.shape[1]:
        raise ValueError("sample and pivot have different numbers of columns")
    k = sample.shape[1]
    perm = np.empty(k, dtype=int)
    signs = np.ones(k)
    free = list(range(k))
    order = np.argsort(-np.linalg.norm(sample, axis=0), kind="stable")
    for col in order:
        x = sample[:, col]
        best = None
        for j in free:
            for sg in (1.0, -1.0):
                d = np.linalg.norm(x - sg * pivot[:, j])
                if best is None or d < best[0]:
                    best = (d, j, sg)
        _, j, sg = best
        perm[j] = col
        signs[j] = sg
        free.remove(j)
    return perm, signs


def _blocks(samples):
    """(name, loadings arrays, scores array, beta slice) per factor block."""
    r = samples.ranks.joint
    out = [("joint", samples.U, samples.V, slice(1, 1 + r))]
    start = 1 + r
    for s, rs in enumerate(samples.ranks.indiv):
        out.append((f"indiv{s}", [samples.W[s]], samples.Vs[s], slice(start, start + rs)))
        start += rs
    return out


def align_chain(samples: PosteriorSamples, iterations=None) -> AlignedSamples:
    """Align every retained (post burn-in) iteration of a chain."""
    its = np.asarray(samples.kept if iterations is None else iterations, dtype=int)
    T = len(its)
    has_beta = samples.beta is not None
    V = samples.V[its].copy()
    U = [u[its].copy() for u in samples.U]
    Vs = [v[its].copy() for v in samples.Vs]
    W = [w[its].copy() for w in samples.W]
    beta = samples.beta[its].copy() if has_beta else None
    out = AlignedSamples(V, U, Vs, W, beta, its, raw=samples)

    for name, loads, scores, bsl in _blocks(samples):
        k = scores.shape[2]
        if k == 0:
            continue
        if any(L.shape[2] != k for L in loads):
            raise ValueError(f"inconsistent ranks in block {name}")
        dims = [L.shape[1] for L in loads]
        stacked = np.concatenate([l[its] for l in loads], axis=1)
        if has_beta:
            stacked = np.concatenate([stacked, samples.beta[its][:, None, bsl]], axis=1)
        augs, rots = varimax_batch(stacked)
        piv = choose_pivot(augs)
        perms = np.empty((T, k), dtype=int)
        sgns = np.empty((T, k))
        cuts = np.cumsum(dims)[:-1]
        for i, t in enumerate(its):
            perm, sg = greedy_match(augs[i], augs[piv])
            perms[i], sgns[i] = perm, sg
            aligned = augs[i][:, perm] * sg
            L, b = split_augmented(aligned, has_beta)
            sc = (scores[t] @ rots[i])[:, perm] * sg
            parts = np.split(L, cuts, axis=0)
            if name == "joint":
                for s, part in enumerate(parts):
                    out.U[s][i] = part
                out.V[i] = sc
            else:
                s = int(name[5:])
                out.W[s][i] = parts[0]
                out.Vs[s][i] = sc
            if has_beta:
                out.beta[i, bsl] = b
        out.pivot_index[name] = piv
        out.permutations[name] = perms
        out.signs[name] = sgns
        out.rotations[name] = np.array(rots)
    return out
