"""Synthetic multi-source data with known joint/individual structure."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from ..data import MultiOmicDataset, OutcomeSpec, NO_OUTCOME


@dataclass
class SimTruth:
    U: list[np.ndarray]
    V: np.ndarray
    W: list[np.ndarray]
    Vs: list[np.ndarray]
    noise: list[np.ndarray]
    beta: np.ndarray | None = None
    tau_sq: float | None = None
    x_scale: float = 1.0
    y_scale: float = 1.0

    @property
    def J(self):
        return [self.x_scale * u @ self.V.T for u in self.U]

    @property
    def A(self):
        return [self.x_scale * w @ vs.T for w, vs in zip(self.W, self.Vs)]

    @property
    def X(self):
        return [j + a + e for j, a, e in zip(self.J, self.A, self.noise)]

    def design(self):
        n = self.V.shape[0]
        return np.hstack([np.ones((n, 1)), self.V, *self.Vs])

    def expected_y(self, kind="continuous"):
        """``E(y | X)``: ``V* beta`` (continuous) or ``Phi(V* beta)`` (binary)."""
        eta = self.design() @ self.beta
        return ndtr(eta) if kind == "binary" else eta


def draw_factors(rng, dims, n, ranks, var_joint=1.0, var_indiv=None):
    """iid Normal factor matrices for given ranks ``(r, [r_s])``."""
    r, rs = ranks
    var_indiv = [var_joint] * len(dims) if var_indiv is None else var_indiv
    sj = math.sqrt(var_joint)
    V = sj * rng.standard_normal((n, r))
    U = [sj * rng.standard_normal((p, r)) for p in dims]
    Vs = [math.sqrt(v) * rng.standard_normal((n, k)) for v, k in zip(var_indiv, rs)]
    W = [math.sqrt(v) * rng.standard_normal((p, k)) for v, p, k in zip(var_indiv, dims, rs)]
    return U, V, W, Vs


def s2n_scale(structure, noise, target) -> float:
    """Multiplier ``c`` with ``||c S||^2 / ||E||^2 = target``."""
    ss = float(sum(np.sum(np.asarray(m) ** 2) for m in _as_list(structure)))
    ee = float(sum(np.sum(np.asarray(m) ** 2) for m in _as_list(noise)))
    if ss == 0:
        raise ValueError("structure is zero; cannot reach a signal-to-noise target")
    if target <= 0:
        raise ValueError("target ratio must be positive")
    return math.sqrt(target * ee / ss)


def apply_s2n(structure, noise, target):
    """Scale ``structure`` to the target ratio; returns ``(c S + E, c)``.

    ``structure`` and ``noise`` may be arrays or matching lists of arrays.
    """
    c = s2n_scale(structure, noise, target)
    if isinstance(structure, (list, tuple)):
        return [c * s + e for s, e in zip(structure, noise)], c
    return c * np.asarray(structure) + np.asarray(noise), c


def _as_list(m):
    return list(m) if isinstance(m, (list, tuple)) else [m]


def generate_factorization_data(dims, n, ranks, seed=0, outcome="none",
                                s2n_x=None, s2n_y=None, from_prior=False,
                                factor_var=1.0, intercept_var=10.0, coef_var=1.0,
                                tau_shape=1.0, tau_scale=1.0):
    """Simulate ``X_s = U_s V^T + W_s V_s^T + E_s`` and optionally an outcome.

    Factors are iid ``N(0, factor_var)``; the outcome coefficients are an
    intercept ``N(0, intercept_var)`` and effects ``N(0, coef_var)``.

    ``from_prior=True`` draws ``tau^2 ~ InvGamma(tau_shape, tau_scale)`` and
    uses it as the outcome noise variance (prior-draw calibration); otherwise
    outcome noise is ``N(0, 1)``.  ``s2n_x`` rescales the total structure and
    ``s2n_y`` rescales the full linear predictor (intercept included) to the
    given squared-norm signal-to-noise ratios.

    Returns ``(dataset, truth, outcome_spec)``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dims = list(dims)
    n = int(n)
    U, V, W, Vs = draw_factors(rng, dims, n, ranks, factor_var)
    noise = [rng.standard_normal((p, n)) for p in dims]
    truth = SimTruth(U, V, W, Vs, noise)
    if s2n_x is not None:
        truth.x_scale = s2n_scale([j + a for j, a in zip(truth.J, truth.A)], noise, s2n_x)
    if outcome == "none":
        ds = MultiOmicDataset(truth.X)
        return ds, truth, NO_OUTCOME
    k = 1 + ranks[0] + sum(ranks[1])
    sd = np.sqrt(np.array([intercept_var] + [coef_var] * (k - 1)))
    beta = sd * rng.standard_normal(k)
    # the truth's scores are on the unscaled factor scale; fold the X scaling
    # into the coefficients so E(y|X) is expressed through truth.design()
    truth.beta = beta
    if outcome == "continuous":
        tau_sq = float(tau_scale / rng.gamma(tau_shape)) if from_prior else 1.0
        e = math.sqrt(tau_sq) * rng.standard_normal(n)
        if s2n_y is not None:
            c = s2n_scale(truth.design() @ beta, e, s2n_y)
            truth.beta = c * beta
            truth.y_scale = c
        truth.tau_sq = tau_sq
        y = truth.expected_y() + e
    elif outcome == "binary":
        y = (rng.random(n) < truth.expected_y("binary")).astype(float)
    else:
        raise ValueError(f"unknown outcome kind {outcome!r}")
    return MultiOmicDataset(truth.X), truth, OutcomeSpec(outcome, y)
