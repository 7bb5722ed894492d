"""Declarative simulation studies: prior-draw validation, structure recovery
and prediction comparison, and imputation accuracy."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, fields

import numpy as np

from ..analytics import credible_intervals, coverage, ci_width, rse, structure_draws
from ..data import MultiOmicDataset
from ..gibbs import PriorSpec, run_sampler
from ..pipeline import fit
from ..unifac import PenaltySpec, RankSpec, unifac_decompose
from .generate import generate_factorization_data
from .missing import inject_missingness, mask_outcome, mean_impute, svd_impute

log = logging.getLogger(__name__)

KINDS = ("validation", "comparison", "imputation")


@dataclass
class StudyConfig:
    kind: str
    dims: list[int]
    n: int
    ranks: dict = field(default_factory=lambda: {"joint": 1, "indiv": [1, 1]})
    s2n_x: list = field(default_factory=lambda: [None])
    s2n_y: list = field(default_factory=lambda: [None])
    missingness: list = field(default_factory=lambda: ["none"])
    fraction: float | None = None
    block_count: int | None = None
    outcome: str = "none"
    outcome_missing: float | None = None
    replications: int = 50
    iters: int = 2000
    burn_in: int = 1000
    seed: int = 0
    factor_var: float = 1.0
    intercept_var: float = 10.0
    coef_var: float = 1.0
    alpha0_sq: float = 1000.0 ** 2
    alpha_sq: float = 1.0
    svd_rank: int = 4
    workers: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"study kind must be one of {KINDS}")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.n < 2 or not self.dims or min(self.dims) < 1:
            raise ValueError("invalid dimensions")
        if len(self.ranks["indiv"]) != len(self.dims):
            raise ValueError("need one individual rank per source")
        for f in (self.fraction, self.outcome_missing):
            if f is not None and not 0 < f < 1:
                raise ValueError("fractions must lie in (0, 1)")
        if self.outcome not in ("none", "continuous", "binary"):
            raise ValueError("outcome must be none, continuous or binary")
        if not self.iters > self.burn_in >= 0:
            raise ValueError("need iters > burn_in >= 0")
        for m in self.missingness:
            if m not in ("none", "entrywise", "blockwise", "mnar"):
                raise ValueError(f"unknown missingness {m!r}")
            if m != "none" and self.fraction is None and not (
                    m == "blockwise" and self.block_count):
                raise ValueError(f"missingness {m!r} needs a fraction")
        if self.kind == "comparison" and self.outcome == "none":
            raise ValueError("the comparison study needs an outcome")

    @property
    def rank_spec(self) -> RankSpec:
        return RankSpec(int(self.ranks["joint"]), [int(r) for r in self.ranks["indiv"]])

    def count_for(self, pattern):
        """Explicit removal count (only blockwise uses a column count)."""
        return self.block_count if pattern == "blockwise" else None

    def conditions(self):
        return [dict(missingness=m, s2n_x=sx, s2n_y=sy) for m, sx, sy in
                itertools.product(self.missingness, self.s2n_x, self.s2n_y)]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return StudyConfig.from_dict(d)


@dataclass
class StudyReport:
    config: dict
    records: list[dict]              # one per (condition, replication)
    aggregates: list[dict]           # one per condition: metric means
    runtime: float

    def table(self, condition=None):
        return [a for a in self.aggregates
                if condition is None or all(a["condition"].get(k) == v
                                            for k, v in condition.items())]

    def metric(self, name, **condition):
        rows = self.table(condition)
        if len(rows) != 1:
            raise KeyError(f"condition {condition} matches {len(rows)} rows")
        return rows[0]["metrics"][name]

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, default=_json_default)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_csv(self, path, per_replication=False):
        rows = self.records if per_replication else self.aggregates
        metrics = sorted({k for r in rows for k in r["metrics"]})
        cond_keys = sorted({k for r in rows for k in r["condition"]})
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            lead = cond_keys + (["replicate"] if per_replication else [])
            w.writerow(lead + metrics)
            for r in rows:
                vals = [r["condition"].get(k) for k in cond_keys]
                if per_replication:
                    vals.append(r["replicate"])
                w.writerow(vals + [r["metrics"].get(m, "") for m in metrics])


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _aggregate(records, conditions):
    out = []
    for cond in conditions:
        rows = [r for r in records if r["condition"] == cond]
        names = sorted({k for r in rows for k in r["metrics"]})
        agg = {}
        for k in names:
            vals = [r["metrics"][k] for r in rows if k in r["metrics"]]
            vals = [v for v in vals if v is not None and not math.isnan(v)]
            agg[k] = float(np.mean(vals)) if vals else float("nan")
        out.append({"condition": cond, "metrics": agg, "replications": len(rows)})
    return out


def _run(config: StudyConfig, worker):
    t0 = time.perf_counter()
    conds = config.conditions()
    seeds = np.random.SeedSequence(config.seed).spawn(config.replications)
    tasks = [(config.to_dict(), cond, rep, seeds[rep])
             for cond in conds for rep in range(config.replications)]
    workers = max(1, int(config.workers))
    if workers == 1:
        results = [worker(*t) for t in tasks]
    else:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(worker, *zip(*tasks)))
    records = [{"condition": t[1], "replicate": t[2], "metrics": m}
               for t, m in zip(tasks, results)]
    return StudyReport(config.to_dict(), records, _aggregate(records, conds),
                       time.perf_counter() - t0)


def _streams(ss, k):
    # rebuild so every condition of a replicate sees the same child streams
    fresh = np.random.SeedSequence(ss.entropy, spawn_key=ss.spawn_key)
    return [np.random.Generator(np.random.Philox(c)) for c in fresh.spawn(k)]


def _structure_metrics(prefix, draws, truth, sel=None):
    """Coverage, RSE of the posterior mean, and CI width over selected
    entries (all entries when ``sel`` is None)."""
    tab = credible_intervals(draws)
    lo, hi, mean = tab.lower, tab.upper, tab.mean
    if sel is not None:
        lo, hi, mean, truth = lo[sel], hi[sel], mean[sel], truth[sel]
    return {f"{prefix}_coverage": coverage((lo, hi), truth),
            f"{prefix}_rse": rse(truth, mean),
            f"{prefix}_ci_width": ci_width((lo, hi))}


def _avg_sources(per_source):
    keys = per_source[0].keys()
    return {k: float(np.mean([d[k] for d in per_source])) for k in keys}


# ---------------------------------------------------------------- validation

def _validation_replicate(cfg, cond, rep, ss):
    cfg = StudyConfig.from_dict(cfg)
    g_data, g_miss, g_y, g_chain = _streams(ss, 4)
    ranks = cfg.rank_spec
    ds, truth, outcome = generate_factorization_data(
        cfg.dims, cfg.n, (ranks.joint, ranks.indiv), g_data, cfg.outcome,
        from_prior=True, factor_var=cfg.factor_var, intercept_var=cfg.intercept_var,
        coef_var=cfg.coef_var)
    pattern = cond["missingness"]
    if pattern != "none":
        ds, _ = inject_missingness(ds, pattern, cfg.fraction, cfg.count_for(pattern), g_miss)
    y_idx = np.array([], dtype=int)
    if outcome.present and cfg.outcome_missing:
        outcome, y_idx = mask_outcome(outcome, cfg.outcome_missing, g_y)
    lam = 1.0 / cfg.factor_var
    prior = PriorSpec(cfg.factor_var, [cfg.factor_var] * ds.q,
                      alpha0_sq=cfg.intercept_var, alpha_sq=cfg.coef_var)
    # matched priors: the mode is the rank-capped thresholding solution
    mode = unifac_decompose(ds, PenaltySpec(lam, [lam] * ds.q), max_ranks=ranks)
    if mode.ranks != ranks:
        # keep ranks fixed at the truth even if thresholding dropped a component
        log.warning("mode ranks %s below truth %s; padding", mode.ranks, ranks)
        mode = _pad_mode(mode, ranks, ds)
    chain = run_sampler(ds, mode, prior, outcome, cfg.iters, cfg.burn_in, g_chain)
    masks = ds.masks
    m = {}
    for which, true_list in (("J", truth.J), ("A", truth.A)):
        per = []
        for s in range(ds.q):
            draws = structure_draws(chain, s, "joint" if which == "J" else "indiv")
            d = {}
            if masks[s].any():
                d.update(_structure_metrics(which, draws, true_list[s], ~masks[s]))
                d.update(_structure_metrics(which + "_miss", draws, true_list[s], masks[s]))
            else:
                d.update(_structure_metrics(which, draws, true_list[s]))
            per.append(d)
        m.update(_avg_sources(per))
    if outcome.present:
        eta = np.stack([chain.linear_predictor(t) for t in chain.kept])
        draws = _expected(eta, outcome.kind)
        ey = truth.expected_y(outcome.kind)
        m.update(_structure_metrics("Ey", draws, ey))
        if len(y_idx):
            m.update(_structure_metrics("Ey_miss", draws[:, y_idx], ey[y_idx]))
        if outcome.kind == "continuous":
            m.update(_structure_metrics("tau_sq", chain.tau_sq[chain.burn_in:],
                                        np.array(truth.tau_sq)))
    return m


def _expected(eta, kind):
    from scipy.special import ndtr
    return ndtr(eta) if kind == "binary" else eta


def _pad_mode(mode, ranks, ds):
    """Append tiny random columns so the factor ranks equal ``ranks``."""
    rng = np.random.default_rng(0)
    eps = 1e-3

    def pad(mat, k):
        extra = k - mat.shape[1]
        if extra <= 0:
            return mat
        return np.hstack([mat, eps * rng.standard_normal((mat.shape[0], extra))])

    mode.V = pad(mode.V, ranks.joint)
    mode.U = [pad(u, ranks.joint) for u in mode.U]
    mode.Vs = [pad(v, k) for v, k in zip(mode.Vs, ranks.indiv)]
    mode.W = [pad(w, k) for w, k in zip(mode.W, ranks.indiv)]
    mode.ranks = ranks
    return mode


def run_validation_study(config: StudyConfig) -> StudyReport:
    """Prior-draw calibration: draw truth from the priors, fit with matched
    hyperparameters and ranks fixed at the truth, and score 95% intervals."""
    if config.kind != "validation":
        raise ValueError("config is not a validation study")
    return _run(config, _validation_replicate)


# ---------------------------------------------------------------- comparison

def _comparison_replicate(cfg, cond, rep, ss):
    cfg = StudyConfig.from_dict(cfg)
    g_data, g_split, g_chain = _streams(ss, 3)
    ranks = cfg.rank_spec
    ds, truth, outcome = generate_factorization_data(
        cfg.dims, cfg.n, (ranks.joint, ranks.indiv), g_data, cfg.outcome,
        s2n_x=cond["s2n_x"], s2n_y=cond["s2n_y"], factor_var=cfg.factor_var,
        intercept_var=cfg.intercept_var, coef_var=cfg.coef_var)
    test = np.sort(g_split.permutation(cfg.n)[:cfg.n // 2])
    y = outcome.values.copy()
    y[test] = np.nan
    outcome = type(outcome)(outcome.kind, y)
    res = fit(ds, outcome, cfg.iters, cfg.burn_in, g_chain,
              alpha0_sq=cfg.alpha0_sq, alpha_sq=cfg.alpha_sq)
    chain, work = res.chain, res.dataset
    m = {"rank_joint": res.mode.ranks.joint,
         "rank_indiv": float(np.mean(res.mode.ranks.indiv))}
    rj, ra = [], []
    for s in range(ds.q):
        sd = work.scaling.noise_sd[s]
        jhat = sd * structure_draws(chain, s, "joint").mean(axis=0)
        ahat = sd * structure_draws(chain, s, "indiv").mean(axis=0)
        rj.append(rse(truth.J[s], jhat))
        ra.append(rse(truth.A[s], ahat))
    m["J_rse"], m["A_rse"] = float(np.mean(rj)), float(np.mean(ra))
    eta = np.stack([chain.linear_predictor(t) for t in chain.kept])
    draws = _expected(eta, outcome.kind)[:, test]
    m.update(_structure_metrics("Ey_test", draws, truth.expected_y(outcome.kind)[test]))
    return m


def run_comparison_study(config: StudyConfig) -> StudyReport:
    """Structure recovery and held-out outcome prediction: the model sees all
    of ``X`` but only the training half of ``y``."""
    if config.kind != "comparison":
        raise ValueError("config is not a comparison study")
    return _run(config, _comparison_replicate)


# ---------------------------------------------------------------- imputation

def _masked_rse(truth_vals, imputed, masks):
    return float(np.mean([rse(t, x[m]) for t, x, m in zip(truth_vals, imputed, masks)]))


def _imputation_replicate(cfg, cond, rep, ss):
    cfg = StudyConfig.from_dict(cfg)
    g_data, g_miss, g_chain = _streams(ss, 3)
    ranks = cfg.rank_spec
    full, truth, _ = generate_factorization_data(
        cfg.dims, cfg.n, (ranks.joint, ranks.indiv), g_data, "none",
        s2n_x=cond["s2n_x"], factor_var=cfg.factor_var)
    ds, rec = inject_missingness(full, cond["missingness"], cfg.fraction,
                                 cfg.count_for(cond["missingness"]), g_miss)
    res = fit(ds, iters=cfg.iters, burn_in=cfg.burn_in, seed=g_chain)
    chain, work = res.chain, res.dataset
    m = {"rank_total": res.mode.ranks.total}
    cov, wid, rses = [], [], []
    kept = slice(chain.burn_in, None)
    for s in range(ds.q):
        msk = rec.masks[s]
        sd, mu = work.scaling.noise_sd[s], work.scaling.row_means[s]
        rows = np.nonzero(msk)[0]
        draws = chain.imputed_X[s][kept] * sd + mu[rows]
        tab = credible_intervals(draws)
        cov.append(coverage(tab, rec.removed[s]))
        wid.append(ci_width(tab))
        rses.append(rse(rec.removed[s], tab.mean))
    m.update(bsf_rse=float(np.mean(rses)), bsf_coverage=float(np.mean(cov)),
             bsf_ci_width=float(np.mean(wid)))
    mode_fit = work.unscale([j + a for j, a in zip(res.mode.J, res.mode.A)])
    m["mode_rse"] = _masked_rse(rec.removed, mode_fit, rec.masks)
    m["mean_rse"] = _masked_rse(rec.removed, mean_impute(ds), rec.masks)
    m["svd_source_rse"] = _masked_rse(rec.removed, svd_impute(ds, cfg.svd_rank), rec.masks)
    m["svd_combined_rse"] = _masked_rse(
        rec.removed, svd_impute(ds, cfg.svd_rank, combined=True), rec.masks)
    return m


def run_imputation_study(config: StudyConfig) -> StudyReport:
    """Posterior-mean imputation against mean, mode and iterative-SVD
    imputation under entrywise, blockwise and value-dependent missingness."""
    if config.kind != "imputation":
        raise ValueError("config is not an imputation study")
    return _run(config, _imputation_replicate)


RUNNERS = {"validation": run_validation_study, "comparison": run_comparison_study,
           "imputation": run_imputation_study}


def run_study(config: StudyConfig) -> StudyReport:
    return RUNNERS[config.kind](config)


# ------------------------------------------------------------------- presets

def _validation(**kw):
    base = dict(kind="validation", dims=[40, 60], n=25,
                ranks={"joint": 1, "indiv": [1, 1]}, replications=50,
                iters=1000, burn_in=500)
    base.update(kw)
    return StudyConfig(**base)


PRESETS = {
    "validation-desk": lambda: _validation(),
    "validation-desk-continuous": lambda: _validation(outcome="continuous"),
    "validation-desk-binary": lambda: _validation(outcome="binary"),
    "validation-desk-missing30": lambda: _validation(
        missingness=["entrywise"], fraction=0.3, iters=4000, burn_in=2000),
    "validation-full": lambda: _validation(dims=[100, 150], n=50, replications=100,
                                            iters=2000, burn_in=1000),
    "comparison-desk": lambda: StudyConfig(
        kind="comparison", dims=[100, 100], n=100, outcome="continuous",
        s2n_x=[9.0, 1 / 3], s2n_y=[9.0, 1 / 3], replications=20,
        iters=2000, burn_in=1000),
    "comparison-full": lambda: StudyConfig(
        kind="comparison", dims=[100, 100], n=200, outcome="continuous",
        s2n_x=[9.0, 3.0, 1.0, 1 / 3], s2n_y=[9.0, 3.0, 1.0, 1 / 3],
        replications=100, iters=10000, burn_in=5000),
    "imputation-desk": lambda: StudyConfig(
        kind="imputation", dims=[100, 100], n=100,
        ranks={"joint": 5, "indiv": [5, 5]}, s2n_x=[9.0, 3.0, 1.0, 1 / 3],
        missingness=["entrywise", "blockwise", "mnar"], fraction=0.1,
        block_count=10, replications=20, iters=2000, burn_in=1000),
    "imputation-full": lambda: StudyConfig(
        kind="imputation", dims=[100, 100], n=100,
        ranks={"joint": 5, "indiv": [5, 5]}, s2n_x=[9.0, 3.0, 1.0, 1 / 3],
        missingness=["entrywise", "blockwise", "mnar"], fraction=0.1,
        block_count=10, replications=100, iters=10000, burn_in=5000),
}


def preset(name: str) -> StudyConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


def noise_only_ranks(dims=(50, 50), n=50, seeds=100, base_seed=0):
    """Mode ranks selected on pure ``N(0, 1)`` noise, one decomposition per
    seed, with the default penalties and no preprocessing."""
    out = []
    for ss in np.random.SeedSequence(base_seed).spawn(seeds):
        rng = np.random.default_rng(ss)
        ds = MultiOmicDataset([rng.standard_normal((p, n)) for p in dims])
        out.append(unifac_decompose(ds).ranks)
    return out


def default_workers():
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
