"""Command-line front end.

Subcommands: decompose, fit, align, summarize, impute, predict, simulate.
Exit codes: 0 success, 2 invalid input or usage, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from contextlib import nullcontext
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import __version__
from .align import align_chain
from .analytics import (cluster_stability, credible_intervals, posterior_predict_y,
                        structure_draws, variance_explained)
from .data import DataError, MultiOmicDataset, load_dataset, preprocess, write_matrix_csv
from .gibbs import NumericalError
from .persist import load_chain, save_chain
from .pipeline import fit
from .unifac import ConvergenceError, unifac_decompose

log = logging.getLogger("bsfp")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int | None
    versions: dict
    input_digests: dict
    wall_time: float = 0.0
    outputs: list = field(default_factory=list)

    def write(self, out_dir):
        with open(Path(out_dir) / "manifest.json", "w") as fh:
            json.dump(asdict(self), fh, indent=2, default=str)


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import scipy
    import sklearn
    return {"bsfp": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__}


def _digests(paths):
    return {str(p): sha256(p) for p in paths if p is not None and Path(p).is_file()}


# ---------------------------------------------------------------- helpers

def _split_paths(text):
    paths = [p.strip() for p in text.split(",") if p.strip()]
    if not paths:
        raise UsageError("--data needs at least one CSV path")
    return paths


def _load_inputs(args):
    if getattr(args, "outcome", None) and not getattr(args, "outcome_type", None):
        raise UsageError("--outcome requires --outcome-type continuous|binary")
    paths = _split_paths(args.data)
    ds, outcome = load_dataset(paths, getattr(args, "outcome", None),
                               getattr(args, "outcome_type", None),
                               reorder=getattr(args, "reorder", False))
    return paths, ds, outcome


def _out_dir(path):
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return str(path)


def _fmt(v):
    return repr(float(v))


def _fit(args, ds, outcome):
    return fit(ds, outcome, iters=args.iters, burn_in=args.burnin, seed=args.seed,
               scale=not args.no_scale, alpha0_sq=args.alpha0_sq,
               alpha_sq=args.alpha_sq, a=args.a, b=args.b)


# ------------------------------------------------------------ summaries

def write_summaries(out, chain, ds: MultiOmicDataset, level=0.95, clusters=None,
                    seed=0):
    """Write posterior summary CSVs for an (aligned or raw) chain."""
    out = _out_dir(out)
    written = []
    long_rows, heat_rows = [], []
    for s in range(ds.q):
        for which in ("joint", "indiv"):
            draws = structure_draws(chain, s, which)
            tab = credible_intervals(draws * ds.scaling.noise_sd[s], level)
            for j, fid in enumerate(ds.feature_ids[s]):
                for i, sid in enumerate(ds.sample_ids):
                    long_rows.append([s + 1, which, fid, sid, _fmt(tab.mean[j, i]),
                                      _fmt(tab.sd[j, i]), _fmt(tab.lower[j, i]),
                                      _fmt(tab.upper[j, i])])
            if which == "joint":
                jmean = tab.mean
            else:
                total = jmean + tab.mean
                for j, fid in enumerate(ds.feature_ids[s]):
                    for i, sid in enumerate(ds.sample_ids):
                        heat_rows.append([s + 1, fid, sid, _fmt(total[j, i])])
    written.append(_write_rows(out / "structures.csv",
                               ["source", "structure", "feature", "sample", "mean", "sd",
                                "lower", "upper"], long_rows))
    written.append(_write_rows(out / "heatmap_long.csv",
                               ["source", "feature", "sample", "value"], heat_rows))
    ve_rows = []
    for which in ("joint", "indiv"):
        for s, tab in enumerate(variance_explained(chain, ds, which, level)):
            ve_rows.append([s + 1, which, _fmt(tab.mean), _fmt(tab.lower), _fmt(tab.upper)])
    if chain.beta is not None:
        names = ["joint"] + [f"indiv{s + 1}" for s in range(ds.q)]
        for name, tab in zip(names, variance_explained(chain, ds, "outcome", level)):
            ve_rows.append(["outcome", name, _fmt(tab.mean), _fmt(tab.lower),
                            _fmt(tab.upper)])
    written.append(_write_rows(out / "variance_explained.csv",
                               ["source", "component", "mean", "lower", "upper"], ve_rows))
    if chain.beta is not None:
        tab = credible_intervals(chain.beta[list(chain.kept)], level)
        written.append(_write_rows(
            out / "beta.csv", ["coefficient", "mean", "sd", "lower", "upper"],
            [[_beta_name(k, chain.ranks), _fmt(tab.mean[k]), _fmt(tab.sd[k]),
              _fmt(tab.lower[k]), _fmt(tab.upper[k])] for k in range(len(tab.mean))]))
        raw = getattr(chain, "raw", None) or chain
        its = getattr(chain, "iterations", np.asarray(list(chain.kept)))
        if raw.tau_sq is not None:
            t = credible_intervals(raw.tau_sq[its], level)
            written.append(_write_rows(out / "tau_sq.csv", ["mean", "sd", "lower", "upper"],
                                       [[_fmt(t.mean), _fmt(t.sd), _fmt(t.lower),
                                         _fmt(t.upper)]]))
        expected, predictive = posterior_predict_y(chain, level=level, seed=seed)
        rows = [[sid, _fmt(expected.mean[i]), _fmt(expected.sd[i]), _fmt(expected.lower[i]),
                 _fmt(expected.upper[i]), _fmt(predictive.lower[i]), _fmt(predictive.upper[i])]
                for i, sid in enumerate(ds.sample_ids)]
        written.append(_write_rows(out / "predictions.csv",
                                   ["sample", "mean", "sd", "lower", "upper",
                                    "pred_lower", "pred_upper"], rows))
    if clusters:
        freq = cluster_stability(chain, clusters, seed=seed)
        written.append(_write_rows(out / "coclustering.csv", ["sample", *ds.sample_ids],
                                   [[sid, *map(_fmt, row)]
                                    for sid, row in zip(ds.sample_ids, freq)]))
    return written


def _beta_name(k, ranks):
    if k == 0:
        return "intercept"
    k -= 1
    if k < ranks.joint:
        return f"joint{k + 1}"
    k -= ranks.joint
    for s, r in enumerate(ranks.indiv):
        if k < r:
            return f"indiv{s + 1}_{k + 1}"
        k -= r
    raise IndexError(k)


def write_aligned(out, aligned, ds):
    """Posterior means of aligned factors plus the permutation/sign audit."""
    out = _out_dir(out)
    written = []
    comp = lambda tag, k: [f"{tag}{c + 1}" for c in range(k)]
    r = aligned.ranks
    written.append(_write_factor(out / "V.csv", aligned.V.mean(axis=0), ds.sample_ids,
                                 comp("joint", r.joint)))
    for s in range(ds.q):
        fid = ds.feature_ids[s]
        written.append(_write_factor(out / f"U_{s + 1}.csv", aligned.U[s].mean(axis=0),
                                     fid, comp("joint", r.joint)))
        written.append(_write_factor(out / f"W_{s + 1}.csv", aligned.W[s].mean(axis=0),
                                     fid, comp(f"indiv{s + 1}_", r.indiv[s])))
        written.append(_write_factor(out / f"Vs_{s + 1}.csv", aligned.Vs[s].mean(axis=0),
                                     ds.sample_ids, comp(f"indiv{s + 1}_", r.indiv[s])))
    with open(out / "alignment_audit.json", "w") as fh:
        json.dump(aligned.audit(), fh)
    written.append(str(out / "alignment_audit.json"))
    arrays = {"V": aligned.V, "iterations": aligned.iterations}
    for s in range(ds.q):
        arrays.update({f"U_{s}": aligned.U[s], f"W_{s}": aligned.W[s],
                       f"Vs_{s}": aligned.Vs[s]})
    if aligned.beta is not None:
        arrays["beta"] = aligned.beta
    np.savez(out / "aligned.npz", **arrays)
    written.append(str(out / "aligned.npz"))
    return written


def _write_factor(path, mat, row_ids, col_ids):
    return _write_rows(path, ["id", *col_ids],
                       [[rid, *map(_fmt, row)] for rid, row in zip(row_ids, mat)])


# -------------------------------------------------------------- commands

def cmd_decompose(args):
    out = _out_dir(args.out)
    if args.noise_only:
        from .sim.studies import noise_only_ranks
        ranks = noise_only_ranks(seeds=args.seeds, base_seed=args.seed)
        zero = sum(r.total == 0 for r in ranks)
        res = {"seeds": args.seeds, "all_zero": zero,
               "ranks": [r.as_dict() for r in ranks]}
        with open(out / "noise_only.json", "w") as fh:
            json.dump(res, fh, indent=2)
        print(f"all ranks zero in {zero}/{args.seeds} seeds")
        return [str(out / "noise_only.json")], []
    if not args.data:
        raise UsageError("decompose needs --data or --noise-only")
    paths, ds, _ = _load_inputs(args)
    work = ds if args.no_scale else preprocess(ds)
    mode = unifac_decompose(work, tol=args.tol, max_iter=args.max_iter,
                            raise_on_nonconvergence=args.strict)
    res = {"ranks": mode.ranks.as_dict(), "objective_trace": mode.objective_trace,
           "converged": mode.converged, "noise_sd": work.scaling.noise_sd}
    with open(out / "mode.json", "w") as fh:
        json.dump(res, fh, indent=2)
    written = [str(out / "mode.json")]
    r = mode.ranks
    written.append(_write_factor(out / "V.csv", mode.V, ds.sample_ids,
                                 [f"joint{k + 1}" for k in range(r.joint)]))
    for s in range(ds.q):
        written.append(_write_factor(out / f"U_{s + 1}.csv", mode.U[s], ds.feature_ids[s],
                                     [f"joint{k + 1}" for k in range(r.joint)]))
        written.append(_write_factor(out / f"W_{s + 1}.csv", mode.W[s], ds.feature_ids[s],
                                     [f"indiv{k + 1}" for k in range(r.indiv[s])]))
        written.append(_write_factor(out / f"Vs_{s + 1}.csv", mode.Vs[s], ds.sample_ids,
                                     [f"indiv{k + 1}" for k in range(r.indiv[s])]))
    print(f"ranks: joint {r.joint}, individual {r.indiv}")
    return written, paths


def cmd_fit(args):
    paths, ds, outcome = _load_inputs(args)
    out = _out_dir(args.out)
    res = _fit(args, ds, outcome)
    save_chain(out / "chain", res.chain, res.dataset)
    aligned = align_chain(res.chain)
    written = [str(out / "chain")]
    written += write_aligned(out / "aligned", aligned, res.dataset)
    written += write_summaries(out / "summary", aligned, res.dataset, args.level,
                               args.clusters, args.seed)
    print(f"ranks: joint {res.mode.ranks.joint}, individual {res.mode.ranks.indiv}")
    return written, paths + ([args.outcome] if args.outcome else [])


def cmd_align(args):
    chain, ds = load_chain(args.chain)
    if ds is None:
        raise UsageError(f"{args.chain} has no saved dataset")
    aligned = align_chain(chain)
    return write_aligned(args.out, aligned, ds), _chain_files(args.chain)


def cmd_summarize(args):
    chain, ds = load_chain(args.chain)
    if ds is None:
        raise UsageError(f"{args.chain} has no saved dataset")
    target = align_chain(chain) if not args.no_align else chain
    return (write_summaries(args.out, target, ds, args.level, args.clusters, args.seed),
            _chain_files(args.chain))


def _chain_files(d):
    return sorted(str(p) for p in Path(d).iterdir() if p.is_file())


def cmd_impute(args):
    paths, ds, outcome = _load_inputs(args)
    out = _out_dir(args.out)
    if not ds.has_missing:
        log.warning("no missing entries in the data; nothing to impute")
    res = _fit(args, ds, outcome)
    chain, work = res.chain, res.dataset
    written, rows = [], []
    kept = slice(chain.burn_in, None)
    for s in range(ds.q):
        m = work.masks[s]
        sd, mu = work.scaling.noise_sd[s], work.scaling.row_means[s]
        jj, ii = np.nonzero(m)
        filled = ds.sources[s].copy()
        if m.any():
            tab = credible_intervals(chain.imputed_X[s][kept] * sd + mu[jj], args.level)
            filled[m] = tab.mean
            for k, (j, i) in enumerate(zip(jj, ii)):
                rows.append([s + 1, ds.feature_ids[s][j], ds.sample_ids[i],
                             _fmt(tab.mean[k]), _fmt(tab.sd[k]), _fmt(tab.lower[k]),
                             _fmt(tab.upper[k])])
        p = out / f"imputed_source{s + 1}.csv"
        write_matrix_csv(p, filled, ds.feature_ids[s], ds.sample_ids)
        written.append(str(p))
    written.append(_write_rows(out / "imputations.csv",
                               ["source", "feature", "sample", "mean", "sd", "lower",
                                "upper"], rows))
    return written, paths + ([args.outcome] if args.outcome else [])


def cmd_predict(args):
    if not args.outcome:
        raise UsageError("predict needs --outcome")
    paths, ds, outcome = _load_inputs(args)
    out = _out_dir(args.out)
    header = ["sample", "mean", "sd", "lower", "upper", "pred_lower", "pred_upper"]
    targets = np.flatnonzero(outcome.mask)
    if targets.size == 0:
        log.warning("outcome is fully observed; there is nothing to predict")
        return [_write_rows(out / "predictions.csv", header, [])], paths + [args.outcome]
    res = _fit(args, ds, outcome)
    expected, predictive = posterior_predict_y(res.chain, targets, args.level, args.seed)
    rows = [[ds.sample_ids[i], _fmt(expected.mean[k]), _fmt(expected.sd[k]),
             _fmt(expected.lower[k]), _fmt(expected.upper[k]),
             _fmt(predictive.lower[k]), _fmt(predictive.upper[k])]
            for k, i in enumerate(targets)]
    return [_write_rows(out / "predictions.csv", header, rows)], paths + [args.outcome]


def cmd_simulate(args):
    from .sim.studies import StudyConfig, preset, run_study
    if bool(args.preset) == bool(args.config):
        raise UsageError("simulate needs exactly one of --preset or --config")
    try:
        cfg = preset(args.preset) if args.preset else StudyConfig.from_json(args.config)
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid JSON config: {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid study config: {exc}") from None
    overrides = {k: v for k, v in (("replications", args.replications),
                                   ("iters", args.iters), ("burn_in", args.burnin),
                                   ("seed", args.seed)) if v is not None}
    overrides["workers"] = args.threads or 1
    cfg = cfg.with_(**overrides)
    out = _out_dir(args.out)
    report = run_study(cfg)
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    report.to_csv(out / "replicates.csv", per_replication=True)
    for a in report.aggregates:
        print(json.dumps(a["condition"]), json.dumps(
            {k: round(v, 4) for k, v in a["metrics"].items()}))
    return [str(out / f) for f in ("report.json", "report.csv", "replicates.csv")], \
        [args.config] if args.config else []


COMMANDS = {"decompose": cmd_decompose, "fit": cmd_fit, "align": cmd_align,
            "summarize": cmd_summarize, "impute": cmd_impute, "predict": cmd_predict,
            "simulate": cmd_simulate}


# ---------------------------------------------------------------- parser

def _data_args(p, outcome=True):
    p.add_argument("--data", help="comma-separated source CSVs (features x samples)")
    p.add_argument("--reorder", action="store_true",
                   help="align sample order of later sources to the first")
    if outcome:
        p.add_argument("--outcome", help="outcome CSV (sample id, value)")
        p.add_argument("--outcome-type", choices=["continuous", "binary"])
    p.add_argument("--no-scale", action="store_true",
                   help="skip row-centering and noise scaling")


def _sampler_args(p):
    p.add_argument("--iters", type=int, help="total sweeps (default depends on missingness)")
    p.add_argument("--burnin", type=int, help="burn-in sweeps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha0-sq", type=float, default=1000.0 ** 2)
    p.add_argument("--alpha-sq", type=float, default=1.0)
    p.add_argument("--a", type=float, default=1.0)
    p.add_argument("--b", type=float, default=1.0)
    p.add_argument("--level", type=float, default=0.95)


def build_parser():
    ap = argparse.ArgumentParser(prog="bsfp", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--threads", type=int, default=None,
                    help="cap on parallel workers and BLAS threads")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="posterior mode and rank selection")
    _data_args(p, outcome=False)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=5000)
    p.add_argument("--strict", action="store_true", help="fail if not converged")
    p.add_argument("--noise-only", action="store_true",
                   help="decompose seeded pure-noise 50x50 pairs and count zero ranks")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    for name, helptext in (("fit", "full pipeline: mode, sampler, alignment, summaries"),
                           ("impute", "posterior-mean imputation of missing entries"),
                           ("predict", "posterior prediction of unobserved outcomes")):
        p = sub.add_parser(name, help=helptext)
        _data_args(p)
        _sampler_args(p)
        if name == "fit":
            p.add_argument("--clusters", type=int, default=None,
                           help="k for co-clustering stability")
        p.add_argument("--out", required=True)

    for name in ("align", "summarize"):
        p = sub.add_parser(name, help=f"{name} a saved chain")
        p.add_argument("--chain", required=True, help="chain directory from fit")
        p.add_argument("--out", required=True)
        if name == "summarize":
            p.add_argument("--level", type=float, default=0.95)
            p.add_argument("--clusters", type=int, default=None)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--no-align", action="store_true")

    p = sub.add_parser("simulate", help="run a simulation study")
    p.add_argument("--preset")
    p.add_argument("--config", help="JSON study config")
    p.add_argument("--replications", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    return ap


def _thread_limit(k):
    if not k:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=k)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "simulate" and args.threads is None:
        from .sim.studies import default_workers
        args.threads = default_workers()
    t0 = time.perf_counter()
    try:
        with _thread_limit(args.threads if args.command != "simulate" else 1):
            written, inputs = COMMANDS[args.command](args)
    except (UsageError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, ConvergenceError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    cfg = {k: v for k, v in vars(args).items()}
    manifest = RunManifest(args.command, argv, cfg, cfg.get("seed"), _versions(),
                           _digests(inputs), time.perf_counter() - t0, written)
    manifest.write(args.out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
