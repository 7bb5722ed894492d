"""Gibbs sampler for the Bayesian joint/individual factorisation, optionally
with a continuous (Gaussian) or binary (probit) outcome regressed on the
scores.

Every factor block shares one precision matrix across its rows (the sources
have unit noise variance and missing entries are carried as imputations), so
each block update is a single Cholesky factorisation plus matrix products.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import linalg
from scipy.special import ndtr, ndtri

from .data import MultiOmicDataset, OutcomeSpec, NO_OUTCOME
from .unifac import ModeDecomposition, PenaltySpec, RankSpec

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)
TAIL_CUTOFF = 5.0


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class PriorSpec:
    lambda_inv_joint: float
    lambda_inv_indiv: list[float]
    alpha0_sq: float = 1000.0 ** 2
    alpha_sq: float = 1.0
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        vals = [self.lambda_inv_joint, *self.lambda_inv_indiv, self.alpha0_sq,
                self.alpha_sq, self.a, self.b]
        if not all(v > 0 for v in vals):
            raise ValueError("prior hyperparameters must be strictly positive")

    @classmethod
    def from_penalties(cls, pen: PenaltySpec, **kw) -> "PriorSpec":
        return cls(1.0 / pen.lambda_joint, [1.0 / l for l in pen.lambda_indiv], **kw)

    def beta_var(self, ranks: RankSpec) -> np.ndarray:
        return np.array([self.alpha0_sq] + [self.alpha_sq] * ranks.total)

    def as_dict(self):
        return asdict(self)


@dataclass
class DecompositionState:
    V: np.ndarray
    U: list[np.ndarray]
    Vs: list[np.ndarray]
    W: list[np.ndarray]
    X: list[np.ndarray]              # sources with current imputations
    beta: np.ndarray | None = None
    tau_sq: float | None = None
    z: np.ndarray | None = None
    y: np.ndarray | None = None      # outcome with current imputations

    def copy(self) -> "DecompositionState":
        cp = lambda a: None if a is None else np.array(a)
        return DecompositionState(
            self.V.copy(), [u.copy() for u in self.U], [v.copy() for v in self.Vs],
            [w.copy() for w in self.W], [x.copy() for x in self.X],
            cp(self.beta), self.tau_sq, cp(self.z), cp(self.y))

    @property
    def ranks(self) -> RankSpec:
        return RankSpec(self.V.shape[1], [v.shape[1] for v in self.Vs])

    def joint(self, s):
        return self.U[s] @ self.V.T

    def indiv(self, s):
        return self.W[s] @ self.Vs[s].T

    def fitted(self, s):
        return self.joint(s) + self.indiv(s)

    def design(self) -> np.ndarray:
        """Outcome design matrix ``[1 | V | V_1 | ... | V_q]``."""
        n = self.V.shape[0]
        return np.hstack([np.ones((n, 1)), self.V, *self.Vs])

    def linear_predictor(self) -> np.ndarray:
        return self.design() @ self.beta

    def beta_blocks(self):
        """Split beta into (intercept, joint, [indiv_s])."""
        r = self.V.shape[1]
        cuts = np.cumsum([1, r] + [v.shape[1] for v in self.Vs])
        parts = np.split(self.beta, cuts)
        return parts[0][0], parts[1], parts[2:2 + len(self.Vs)]

    def response(self):
        """Working response for the regression block: z (probit) or y."""
        return self.z if self.z is not None else self.y

    def noise_var(self):
        return self.tau_sq if self.z is None else 1.0


# ---------------------------------------------------------------- draws

def mvn_rows(rng, precision, lin, jitter_warn=True):
    """Draw independent rows ``x_i ~ N(B lin_i, B)`` with ``B = precision^-1``.

    ``lin`` is ``m x k`` (one linear term per row).  The covariance is obtained
    from the precision by a Cholesky solve and factorised again for the draw.
    """
    k = precision.shape[0]
    m = lin.shape[0]
    if k == 0:
        return np.zeros((m, 0))
    if not np.all(np.isfinite(precision)) or not np.all(np.isfinite(lin)):
        raise NumericalError("non-finite precision or linear term")
    P = 0.5 * (precision + precision.T)
    try:
        B = linalg.cho_solve(linalg.cho_factor(P, lower=True), np.eye(k))
        L = linalg.cholesky(0.5 * (B + B.T), lower=True)
    except linalg.LinAlgError:
        eps = 1e-10 * np.trace(P) / k
        if jitter_warn:
            log.warning("precision not positive definite; adding jitter %.3g", eps)
        try:
            B = linalg.cho_solve(linalg.cho_factor(P + eps * np.eye(k), lower=True),
                                 np.eye(k))
            L = linalg.cholesky(0.5 * (B + B.T) + eps * np.eye(k), lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError("precision matrix is not positive definite") from exc
    mean = lin @ B
    return mean + rng.standard_normal((m, k)) @ L.T


def _std_trunc_below(rng, lower):
    """Standard normal draws conditioned on ``x > lower`` (elementwise)."""
    lower = np.asarray(lower, dtype=float)
    out = np.empty_like(lower)
    bulk = lower < TAIL_CUTOFF
    if bulk.any():
        u = rng.random(bulk.sum())
        # upper-tail inversion keeps precision when lower is large
        tail_mass = ndtr(-lower[bulk])
        out[bulk] = -ndtri(u * tail_mass)
    idx = np.flatnonzero(~bulk)
    for i in idx:
        a = lower.flat[i]
        alpha = 0.5 * (a + math.sqrt(a * a + 4.0))
        while True:
            x = a + rng.exponential(1.0 / alpha)
            if rng.random() <= math.exp(-0.5 * (x - alpha) ** 2):
                out.flat[i] = x
                break
    return out


def truncated_normal(rng, mean, positive):
    """Unit-variance normal draws truncated to (0, inf) where ``positive`` is
    True and to (-inf, 0) where it is False."""
    mean = np.asarray(mean, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    # z = mean + e with e > -mean, or z = mean - e with e > mean
    lower = np.where(positive, -mean, mean)
    e = _std_trunc_below(rng, lower)
    return np.where(positive, mean + e, mean - e)


def inv_gamma(rng, shape, scale):
    return scale / rng.gamma(shape)


# ------------------------------------------------------- conditional steps

def cond_joint_scores(state, prior, rng):
    r = state.V.shape[1]
    if r == 0:
        return state
    U = np.vstack(state.U)
    resid = np.vstack([x - state.indiv(s) for s, x in enumerate(state.X)])
    P = U.T @ U + np.eye(r) / prior.lambda_inv_joint
    lin = resid.T @ U
    if state.beta is not None:
        b0, bj, bi = state.beta_blocks()
        t2 = state.noise_var()
        yres = state.response() - b0 - sum(v @ b for v, b in zip(state.Vs, bi))
        P = P + np.outer(bj, bj) / t2
        lin = lin + np.outer(yres, bj) / t2
    state.V = mvn_rows(rng, P, lin)
    return state


def cond_joint_loadings(state, prior, rng):
    r = state.V.shape[1]
    if r == 0:
        return state
    V = state.V
    P = V.T @ V + np.eye(r) / prior.lambda_inv_joint
    for s, x in enumerate(state.X):
        lin = (x - state.indiv(s)) @ V
        state.U[s] = mvn_rows(rng, P, lin)
    return state


def cond_indiv_scores(state, prior, rng):
    for s, x in enumerate(state.X):
        rs = state.Vs[s].shape[1]
        if rs == 0:
            continue
        W = state.W[s]
        P = W.T @ W + np.eye(rs) / prior.lambda_inv_indiv[s]
        lin = (x - state.joint(s)).T @ W
        if state.beta is not None:
            b0, bj, bi = state.beta_blocks()
            t2 = state.noise_var()
            other = sum(state.Vs[k] @ bi[k] for k in range(len(bi)) if k != s)
            yres = state.response() - b0 - state.V @ bj - other
            P = P + np.outer(bi[s], bi[s]) / t2
            lin = lin + np.outer(yres, bi[s]) / t2
        state.Vs[s] = mvn_rows(rng, P, lin)
    return state


def cond_indiv_loadings(state, prior, rng):
    for s, x in enumerate(state.X):
        rs = state.Vs[s].shape[1]
        if rs == 0:
            continue
        Vs = state.Vs[s]
        P = Vs.T @ Vs + np.eye(rs) / prior.lambda_inv_indiv[s]
        state.W[s] = mvn_rows(rng, P, (x - state.joint(s)) @ Vs)
    return state


def regression_posterior(design, response, noise_var, prior_var):
    """Precision and mean of the conjugate Gaussian posterior for beta."""
    P = design.T @ design / noise_var + np.diag(1.0 / prior_var)
    lin = design.T @ response / noise_var
    mean = linalg.cho_solve(linalg.cho_factor(P, lower=True), lin)
    return P, mean


def cond_regression(state, prior, rng):
    D = state.design()
    prior_var = prior.beta_var(state.ranks)
    P = D.T @ D / state.noise_var() + np.diag(1.0 / prior_var)
    lin = D.T @ state.response() / state.noise_var()
    state.beta = mvn_rows(rng, P, lin[None, :])[0]
    return state


def cond_noise_var(state, prior, rng):
    resid = state.y - state.linear_predictor()
    n = len(resid)
    state.tau_sq = float(inv_gamma(rng, prior.a + n / 2, prior.b + 0.5 * resid @ resid))
    return state


def cond_latent_probit(state, outcome, rng):
    """Refresh z: truncated by the sign of observed y, unrestricted where y is
    missing."""
    mu = state.linear_predictor()
    obs = ~outcome.mask
    z = mu + rng.standard_normal(len(mu))
    if obs.any():
        z[obs] = truncated_normal(rng, mu[obs], outcome.values[obs] == 1)
    state.z = z
    return state


def impute_entries(state, masks, rng):
    for s, m in enumerate(masks):
        if not m.any():
            continue
        fit = state.fitted(s)[m]
        x = state.X[s].copy()
        x[m] = fit + rng.standard_normal(fit.shape)
        state.X[s] = x
    return state


def impute_outcome(state, outcome, rng):
    m = outcome.mask
    if not m.any():
        return state
    y = state.y.copy()
    if outcome.kind == "binary":
        y[m] = (state.z[m] > 0).astype(float)
    else:
        mu = state.linear_predictor()[m]
        y[m] = mu + math.sqrt(state.tau_sq) * rng.standard_normal(m.sum())
    state.y = y
    return state


def _norm_logpdf_sum(resid, var):
    resid = np.asarray(resid, dtype=float)
    return -0.5 * (resid.size * (LOG_2PI + math.log(var)) + np.sum(resid * resid) / var)


def log_joint(state, prior, outcome=NO_OUTCOME) -> float:
    """Log joint density of data (with current imputations), factors and the
    outcome model at the current state."""
    val = 0.0
    for s, x in enumerate(state.X):
        val += _norm_logpdf_sum(x - state.fitted(s), 1.0)
        val += _norm_logpdf_sum(state.U[s], prior.lambda_inv_joint)
        val += _norm_logpdf_sum(state.W[s], prior.lambda_inv_indiv[s])
        val += _norm_logpdf_sum(state.Vs[s], prior.lambda_inv_indiv[s])
    val += _norm_logpdf_sum(state.V, prior.lambda_inv_joint)
    if outcome.present:
        bvar = prior.beta_var(state.ranks)
        val += -0.5 * (len(bvar) * LOG_2PI + np.sum(np.log(bvar))
                       + np.sum(state.beta ** 2 / bvar))
        mu = state.linear_predictor()
        if outcome.kind == "binary":
            val += _norm_logpdf_sum(state.z - mu, 1.0)
        else:
            val += _norm_logpdf_sum(state.y - mu, state.tau_sq)
            a, b, t2 = prior.a, prior.b, state.tau_sq
            val += a * math.log(b) - math.lgamma(a) - (a + 1) * math.log(t2) - b / t2
    return float(val)


def gibbs_sweep(state, ds: MultiOmicDataset, prior: PriorSpec,
                outcome: OutcomeSpec = NO_OUTCOME, rng=None, masks=None):
    """One full scan: V, U_s, V_s, W_s, beta, tau^2, then z and imputations."""
    if masks is None:
        masks = ds.masks
    cond_joint_scores(state, prior, rng)
    cond_joint_loadings(state, prior, rng)
    cond_indiv_scores(state, prior, rng)
    cond_indiv_loadings(state, prior, rng)
    if outcome.present:
        cond_regression(state, prior, rng)
        if outcome.kind == "continuous":
            cond_noise_var(state, prior, rng)
        else:
            cond_latent_probit(state, outcome, rng)
    impute_entries(state, masks, rng)
    if outcome.present:
        impute_outcome(state, outcome, rng)
    return state


# ------------------------------------------------------------ chain driver

class ChainView:
    """Accessors shared by raw and aligned chains (leading axis = iteration)."""

    def __len__(self):
        return self.V.shape[0]

    @property
    def ranks(self) -> RankSpec:
        return RankSpec(self.V.shape[2], [v.shape[2] for v in self.Vs])

    @property
    def q(self):
        return len(self.U)

    @property
    def n(self):
        return self.V.shape[1]

    def joint(self, t, s):
        return self.U[s][t] @ self.V[t].T

    def indiv(self, t, s):
        return self.W[s][t] @ self.Vs[s][t].T

    def joint_stacked(self, t):
        return np.vstack([u[t] for u in self.U]) @ self.V[t].T

    def design(self, t):
        return np.hstack([np.ones((self.n, 1)), self.V[t], *(v[t] for v in self.Vs)])

    def linear_predictor(self, t):
        return self.design(t) @ self.beta[t]


@dataclass
class PosteriorSamples(ChainView):
    """Stacked chain of sampler states plus imputations and the log-joint
    trace."""

    V: np.ndarray
    U: list[np.ndarray]
    Vs: list[np.ndarray]
    W: list[np.ndarray]
    imputed_X: list[np.ndarray]
    log_joint: np.ndarray
    burn_in: int
    seed: object
    prior: PriorSpec
    outcome_kind: str = "none"
    beta: np.ndarray | None = None
    tau_sq: np.ndarray | None = None
    z: np.ndarray | None = None
    imputed_y: np.ndarray | None = None
    masks: list[np.ndarray] = field(default_factory=list)
    y_mask: np.ndarray | None = None
    y_values: np.ndarray | None = None     # outcome with NaN where unobserved
    meta: dict = field(default_factory=dict)

    @property
    def kept(self) -> range:
        return range(self.burn_in, len(self))

    def state(self, t) -> DecompositionState:
        """Rebuild iteration ``t`` (imputed sources are not reconstructed)."""
        return DecompositionState(
            self.V[t].copy(), [u[t].copy() for u in self.U],
            [v[t].copy() for v in self.Vs], [w[t].copy() for w in self.W], [],
            None if self.beta is None else self.beta[t].copy(),
            None if self.tau_sq is None else float(self.tau_sq[t]),
            None if self.z is None else self.z[t].copy())

    @property
    def states(self):
        return [self.state(t) for t in range(len(self))]


def initial_state(mode: ModeDecomposition, ds: MultiOmicDataset, prior: PriorSpec,
                  outcome: OutcomeSpec, rng) -> DecompositionState:
    """Factors at the mode; beta and tau^2 drawn from their priors; masked
    data entries start at the mode's fitted values."""
    X = [np.where(m, j + a, x) for x, m, j, a in
         zip(ds.filled(0.0), ds.masks, mode.J, mode.A)]
    st = DecompositionState(mode.V.copy(), [u.copy() for u in mode.U],
                            [v.copy() for v in mode.Vs], [w.copy() for w in mode.W], X)
    if not outcome.present:
        return st
    if outcome.n != ds.n:
        raise ValueError("outcome length does not match number of samples")
    st.beta = rng.standard_normal(1 + st.ranks.total) * np.sqrt(prior.beta_var(st.ranks))
    st.y = np.where(outcome.mask, 0.0, outcome.values)
    if outcome.kind == "continuous":
        st.tau_sq = float(inv_gamma(rng, prior.a, prior.b))
        impute_outcome(st, outcome, rng)
    else:
        cond_latent_probit(st, outcome, rng)
        impute_outcome(st, outcome, rng)
    return st


def make_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def run_sampler(ds: MultiOmicDataset, mode: ModeDecomposition, prior: PriorSpec,
                outcome: OutcomeSpec = NO_OUTCOME, iters: int = 2000,
                burn_in: int = 1000, seed=0, init: DecompositionState | None = None,
                progress=None) -> PosteriorSamples:
    """Run one chain of ``iters`` sweeps starting from the posterior mode."""
    if not iters > burn_in >= 0:
        raise ValueError("need iters > burn_in >= 0")
    rng = make_rng(seed)
    masks = ds.masks
    st = init.copy() if init is not None else initial_state(mode, ds, prior, outcome, rng)
    if outcome.present and st.ranks.total == 0:
        log.warning("all ranks are zero; the outcome model is intercept-only")
    n = ds.n
    T = iters
    ranks = st.ranks
    V = np.empty((T, n, ranks.joint))
    U = [np.empty((T, u.shape[0], ranks.joint)) for u in st.U]
    Vs = [np.empty((T, n, r)) for r in ranks.indiv]
    W = [np.empty((T, w.shape[0], w.shape[1])) for w in st.W]
    imp = [np.empty((T, int(m.sum()))) for m in masks]
    lj = np.empty(T)
    has_y = outcome.present
    beta = np.empty((T, 1 + ranks.total)) if has_y else None
    tau = np.empty(T) if outcome.kind == "continuous" else None
    z = np.empty((T, n)) if outcome.kind == "binary" else None
    ymask = outcome.mask if has_y else None
    imp_y = np.empty((T, int(ymask.sum()))) if has_y else None
    t0 = time.perf_counter()
    for t in range(T):
        gibbs_sweep(st, ds, prior, outcome, rng, masks)
        V[t] = st.V
        for s in range(ds.q):
            U[s][t] = st.U[s]
            Vs[s][t] = st.Vs[s]
            W[s][t] = st.W[s]
            imp[s][t] = st.X[s][masks[s]]
        if has_y:
            beta[t] = st.beta
            imp_y[t] = st.y[ymask]
            if tau is not None:
                tau[t] = st.tau_sq
            if z is not None:
                z[t] = st.z
        lj[t] = log_joint(st, prior, outcome)
        if not np.isfinite(lj[t]):
            raise NumericalError(f"non-finite log joint at iteration {t}")
        if progress is not None:
            progress(t)
    meta = {"iters": iters, "burn_in": burn_in, "ranks": ranks.as_dict(),
            "prior": prior.as_dict(), "outcome_kind": outcome.kind,
            "seconds": time.perf_counter() - t0}
    return PosteriorSamples(V, U, Vs, W, imp, lj, burn_in,
                            seed if isinstance(seed, int) else None, prior,
                            outcome.kind, beta, tau, z, imp_y, masks, ymask,
                            outcome.values if has_y else None, meta)


def default_iterations(ds: MultiOmicDataset, outcome: OutcomeSpec = NO_OUTCOME):
    missing = ds.has_missing or (outcome.present and outcome.mask.any())
    return (10000, 5000) if missing else (2000, 1000)
