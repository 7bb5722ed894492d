"""Structured nuclear-norm decomposition into joint and individual structure.

Minimises

    1/2 sum_s ||X_s - J_s - A_s||_F^2 + lam ||J_.||_* + sum_s lam_s ||A_s||_*

over observed entries by block-coordinate soft singular-value thresholding.
Missing entries are handled EM-style: before each block update they are
replaced by the current fitted structure.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import MultiOmicDataset

log = logging.getLogger(__name__)

RANK_TOL = 1e-8


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class PenaltySpec:
    lambda_joint: float
    lambda_indiv: list[float]


@dataclass(frozen=True)
class RankSpec:
    joint: int
    indiv: list[int]

    @property
    def total(self) -> int:
        return self.joint + sum(self.indiv)

    def as_dict(self):
        return {"joint": self.joint, "indiv": list(self.indiv)}


@dataclass
class ModeDecomposition:
    J: list[np.ndarray]
    A: list[np.ndarray]
    U: list[np.ndarray]
    V: np.ndarray
    W: list[np.ndarray]
    Vs: list[np.ndarray]
    ranks: RankSpec
    objective_trace: list[float] = field(default_factory=list)
    converged: bool = True

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


def default_penalties(n: int, dims) -> PenaltySpec:
    """lam = sqrt(n) + sqrt(p), lam_s = sqrt(n) + sqrt(p_s)."""
    dims = list(dims)
    p = sum(dims)
    return PenaltySpec(math.sqrt(n) + math.sqrt(p),
                       [math.sqrt(n) + math.sqrt(ps) for ps in dims])


def _svd(M):
    try:
        return np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError:
        # gesdd occasionally fails to converge; gesvd is slower but robust
        import scipy.linalg
        return scipy.linalg.svd(M, full_matrices=False, lapack_driver="gesvd")


def soft_threshold_svd(M, t, max_rank=None, return_factors=False):
    """Shrink every singular value of ``M`` by ``t``, truncating at zero.

    ``max_rank`` additionally keeps only the leading components, which gives
    the minimiser of the thresholding problem under a rank constraint.
    """
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        out = np.zeros_like(M)
        if return_factors:
            return out, np.zeros((M.shape[0], 0)), np.zeros(0), np.zeros((0, M.shape[1]))
        return out
    u, s, vt = _svd(M)
    d = np.maximum(s - t, 0.0)
    k = int(np.sum(d > 0))
    if max_rank is not None:
        k = min(k, max_rank)
    u, d, vt = u[:, :k], d[:k], vt[:k]
    out = (u * d) @ vt
    if return_factors:
        return out, u, d, vt
    return out


def nuclear_norm(M) -> float:
    M = np.asarray(M)
    if M.size == 0:
        return 0.0
    return float(np.sum(np.linalg.svd(M, compute_uv=False)))


def _residual_sq(ds, fitted):
    tot = 0.0
    for x, f in zip(ds.sources, fitted):
        r = x - f
        tot += float(np.nansum(r * r))
    return tot


def nn_objective(ds: MultiOmicDataset, J, A, pen: PenaltySpec) -> float:
    """Penalised objective; missing entries are left out of the fit term."""
    if len(J) != ds.q or len(A) != ds.q:
        raise ValueError("need one joint and one individual matrix per source")
    for x, j, a in zip(ds.sources, J, A):
        if j.shape != x.shape or a.shape != x.shape:
            raise ValueError("structure shape does not match source")
    fit = 0.5 * _residual_sq(ds, [j + a for j, a in zip(J, A)])
    pen_j = pen.lambda_joint * nuclear_norm(np.vstack(J))
    pen_a = sum(l * nuclear_norm(a) for l, a in zip(pen.lambda_indiv, A))
    return fit + pen_j + pen_a


def l2_objective(ds: MultiOmicDataset, U, V, W, Vs, pen: PenaltySpec) -> float:
    """Frobenius-penalised factor objective (twice the nuclear-norm objective
    at balanced factorisations of its minimiser)."""
    if len(U) != ds.q or len(W) != ds.q or len(Vs) != ds.q:
        raise ValueError("need factors for every source")
    fitted = []
    for s, x in enumerate(ds.sources):
        f = U[s] @ V.T + W[s] @ Vs[s].T
        if f.shape != x.shape:
            raise ValueError("factor shapes do not match source")
        fitted.append(f)
    val = _residual_sq(ds, fitted)
    val += pen.lambda_joint * (sum(np.sum(u * u) for u in U) + np.sum(V * V))
    for l, w, vs in zip(pen.lambda_indiv, W, Vs):
        val += l * (np.sum(w * w) + np.sum(vs * vs))
    return float(val)


def balanced_factors(M, rank_tol=RANK_TOL):
    """Split ``M = L R^T`` with ``L = U D^1/2`` and ``R = V D^1/2``."""
    if M.size == 0 or not np.any(M):
        return np.zeros((M.shape[0], 0)), np.zeros((M.shape[1], 0))
    u, s, vt = _svd(M)
    k = int(np.sum(s > rank_tol * s[0]))
    root = np.sqrt(s[:k])
    return u[:, :k] * root, vt[:k].T * root


def _split(stack, dims):
    return np.split(stack, np.cumsum(dims)[:-1], axis=0)


def unifac_decompose(ds: MultiOmicDataset, penalties: PenaltySpec | None = None,
                     tol: float = 1e-8, max_iter: int = 5000, init=None,
                     max_ranks: RankSpec | None = None,
                     raise_on_nonconvergence: bool = False) -> ModeDecomposition:
    """Block-coordinate soft-thresholding for the joint/individual split.

    Each sweep updates ``J_.`` from ``X_. - A_.`` with threshold ``lam`` and
    then every ``A_s`` from ``X_s - J_s`` with threshold ``lam_s``.  Iterates
    until the relative objective decrease falls below ``tol``.

    ``init`` optionally gives starting ``(J, A)`` lists.  ``max_ranks`` caps
    the retained ranks (rank-constrained mode, used when ranks are fixed).
    """
    if penalties is None:
        penalties = default_penalties(ds.n, ds.dims)
    dims, q = ds.dims, ds.q
    masks = ds.masks
    any_missing = any(m.any() for m in masks)
    X = ds.filled(0.0)
    if init is None:
        J = [np.zeros_like(x) for x in X]
        A = [np.zeros_like(x) for x in X]
    else:
        J = [np.array(j, dtype=float) for j in init[0]]
        A = [np.array(a, dtype=float) for a in init[1]]
    rj = None if max_ranks is None else max_ranks.joint
    ra = [None] * q if max_ranks is None else list(max_ranks.indiv)

    def completed():
        if not any_missing:
            return X
        return [np.where(m, j + a, x) for x, m, j, a in zip(X, masks, J, A)]

    trace = [nn_objective(ds, J, A, penalties)]
    converged = False
    for it in range(max_iter):
        Xc = completed()
        Jst = soft_threshold_svd(np.vstack([x - a for x, a in zip(Xc, A)]),
                                 penalties.lambda_joint, rj)
        J = _split(Jst, dims)
        Xc = completed()
        A = [soft_threshold_svd(Xc[s] - J[s], penalties.lambda_indiv[s], ra[s])
             for s in range(q)]
        obj = nn_objective(ds, J, A, penalties)
        prev = trace[-1]
        trace.append(obj)
        if obj > prev * (1 + 1e-10) + 1e-10:
            log.warning("objective increased at sweep %d: %.12g -> %.12g",
                        it, prev, obj)
        if prev - obj <= tol * max(abs(prev), 1e-300):
            converged = True
            break
    if not converged:
        msg = (f"no convergence in {max_iter} sweeps; objective {trace[-1]:.10g}, "
               f"last change {trace[-2] - trace[-1]:.3g}")
        if raise_on_nonconvergence:
            raise ConvergenceError(msg)
        log.warning(msg)

    U_st, V = balanced_factors(np.vstack(J))
    U = _split(U_st, dims)
    W, Vs = [], []
    for a in A:
        w, vs = balanced_factors(a)
        W.append(w)
        Vs.append(vs)
    ranks = RankSpec(V.shape[1], [vs.shape[1] for vs in Vs])
    return ModeDecomposition(J, A, U, V, W, Vs, ranks, trace, converged)
