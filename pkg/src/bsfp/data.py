"""Multi-source data containers, CSV ingestion, centering and noise scaling.

Sources are stored as ``p_s x n`` float arrays (features by samples) with
``NaN`` at missing positions; the boolean missing masks are derived from them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import integrate, optimize

MISSING_TOKENS = {"", "NA", "na", "NaN", "nan"}


class DataError(ValueError):
    """Raised on malformed or inconsistent input data."""


@dataclass(frozen=True)
class ScalingMeta:
    row_means: list[np.ndarray]
    noise_sd: list[float]
    centered: bool = False
    scaled: bool = False


@dataclass(frozen=True)
class OutcomeSpec:
    """Outcome vector; ``values`` holds NaN where the outcome is unobserved."""

    kind: str = "none"
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("none", "continuous", "binary"):
            raise DataError(f"unknown outcome kind {self.kind!r}")
        if self.kind == "none":
            return
        if self.values is None:
            raise DataError("outcome values required")
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise DataError("outcome must be a vector")
        obs = v[~np.isnan(v)]
        if not np.all(np.isfinite(obs)):
            raise DataError("observed outcome values must be finite")
        if self.kind == "binary" and not np.all((obs == 0) | (obs == 1)):
            raise DataError("binary outcome values must be 0 or 1")
        object.__setattr__(self, "values", v)

    @property
    def present(self) -> bool:
        return self.kind != "none"

    @property
    def mask(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def n(self) -> int:
        return len(self.values)


NO_OUTCOME = OutcomeSpec()


@dataclass(frozen=True)
class MultiOmicDataset:
    sources: list[np.ndarray]
    sample_ids: list[str] = field(default=None)
    feature_ids: list[list[str]] = field(default=None)
    scaling: ScalingMeta = field(default=None)

    def __post_init__(self):
        if len(self.sources) < 1:
            raise DataError("need at least one source")
        srcs = [np.array(x, dtype=float) for x in self.sources]
        n = srcs[0].shape[1] if srcs[0].ndim == 2 else -1
        for s, x in enumerate(srcs):
            if x.ndim != 2:
                raise DataError(f"source {s} is not a matrix")
            if x.shape[1] != n:
                raise DataError(
                    f"source {s} has {x.shape[1]} samples, expected {n}")
            if x.shape[0] < 1:
                raise DataError(f"source {s} has no features")
            if np.isinf(x).any():
                raise DataError(f"source {s} has infinite entries")
            x.setflags(write=False)
        if n < 2:
            raise DataError("need at least two samples")
        object.__setattr__(self, "sources", srcs)
        if self.sample_ids is None:
            object.__setattr__(self, "sample_ids", [f"s{i}" for i in range(n)])
        elif len(self.sample_ids) != n:
            raise DataError("sample_ids length does not match n")
        if len(set(self.sample_ids)) != n:
            raise DataError("duplicate sample ids")
        if self.feature_ids is None:
            fids = [[f"src{s}_f{j}" for j in range(x.shape[0])]
                    for s, x in enumerate(srcs)]
            object.__setattr__(self, "feature_ids", fids)
        elif [len(f) for f in self.feature_ids] != [x.shape[0] for x in srcs]:
            raise DataError("feature_ids lengths do not match sources")
        if self.scaling is None:
            meta = ScalingMeta([np.zeros(x.shape[0]) for x in srcs],
                               [1.0] * len(srcs))
            object.__setattr__(self, "scaling", meta)

    @property
    def q(self) -> int:
        return len(self.sources)

    @property
    def n(self) -> int:
        return self.sources[0].shape[1]

    @property
    def dims(self) -> list[int]:
        return [x.shape[0] for x in self.sources]

    @property
    def p(self) -> int:
        return sum(self.dims)

    @property
    def masks(self) -> list[np.ndarray]:
        return [np.isnan(x) for x in self.sources]

    @property
    def has_missing(self) -> bool:
        return any(m.any() for m in self.masks)

    def filled(self, value: float = 0.0) -> list[np.ndarray]:
        """Copies of the sources with missing entries replaced by ``value``."""
        return [np.where(np.isnan(x), value, x) for x in self.sources]

    def stacked(self, value: float = 0.0) -> np.ndarray:
        return np.vstack(self.filled(value))

    def with_sources(self, sources, scaling=None) -> "MultiOmicDataset":
        return replace(self, sources=list(sources),
                       scaling=self.scaling if scaling is None else scaling)

    def unscale(self, mats: Sequence[np.ndarray], uncenter=True) -> list[np.ndarray]:
        """Map source-shaped matrices back to the original data units."""
        out = []
        for s, m in enumerate(mats):
            m = np.asarray(m, dtype=float) * self.scaling.noise_sd[s]
            if uncenter:
                m = m + self.scaling.row_means[s][:, None]
            out.append(m)
        return out


def _read_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path}: needs a header row and at least one feature")
    header = [h.strip() for h in rows[0][1:]]
    feats, vals = [], []
    for k, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) - 1 != len(header):
            raise DataError(f"{path}:{k}: expected {len(header)} values")
        feats.append(row[0].strip())
        line = []
        for c in row[1:]:
            c = c.strip()
            if c in MISSING_TOKENS:
                line.append(np.nan)
                continue
            try:
                line.append(float(c))
            except ValueError:
                raise DataError(f"{path}:{k}: non-numeric token {c!r}") from None
        vals.append(line)
    return header, feats, np.array(vals, dtype=float).reshape(len(feats), len(header))


def read_outcome_csv(path, sample_ids=None):
    """Read an outcome file: either two columns (sample id, value) or one
    header row of sample ids with a single value row."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty outcome file")
    if len(rows) == 2 and len(rows[0]) > 2:
        ids = [c.strip() for c in rows[0][1:]]
        raw = [c.strip() for c in rows[1][1:]]
    else:
        body = rows[1:] if _is_header(rows[0]) else rows
        ids = [r[0].strip() for r in body]
        raw = [r[1].strip() if len(r) > 1 else "" for r in body]
    vals = []
    for c in raw:
        if c in MISSING_TOKENS:
            vals.append(np.nan)
        else:
            try:
                vals.append(float(c))
            except ValueError:
                raise DataError(f"{path}: non-numeric outcome {c!r}") from None
    vals = np.array(vals)
    if sample_ids is not None:
        if set(ids) != set(sample_ids) or len(ids) != len(sample_ids):
            raise DataError(f"{path}: outcome sample ids do not match data")
        pos = {k: i for i, k in enumerate(ids)}
        vals = vals[[pos[k] for k in sample_ids]]
    return vals


def _is_header(row):
    try:
        float(row[1])
        return False
    except (ValueError, IndexError):
        return row[1].strip() not in MISSING_TOKENS or row[0].strip() == ""


def load_dataset(source_paths, outcome_path=None, outcome_kind=None,
                 reorder=False):
    """Load CSV sources (rows = features, header = sample ids).

    With ``reorder=True`` later sources are permuted to the sample order of the
    first; otherwise differing sample orders are an error.
    """
    headers, feats, mats = [], [], []
    for path in source_paths:
        if not Path(path).exists():
            raise DataError(f"no such file: {path}")
        h, f, m = _read_matrix_csv(path)
        if len(set(h)) != len(h):
            raise DataError(f"{path}: duplicate sample ids")
        headers.append(h)
        feats.append(f)
        mats.append(m)
    ref = headers[0]
    for k in range(1, len(mats)):
        if headers[k] == ref:
            continue
        if not reorder or set(headers[k]) != set(ref):
            raise DataError(
                f"{source_paths[k]}: sample ids differ from {source_paths[0]}")
        pos = {sid: i for i, sid in enumerate(headers[k])}
        mats[k] = mats[k][:, [pos[sid] for sid in ref]]
    for path, m in zip(source_paths, mats):
        bad = np.where(np.isnan(m).all(axis=1))[0]
        if len(bad):
            raise DataError(f"{path}: feature row {bad[0]} is entirely missing")
    ds = MultiOmicDataset(mats, sample_ids=ref, feature_ids=feats)
    if outcome_path is None:
        return ds, NO_OUTCOME
    if outcome_kind not in ("continuous", "binary"):
        raise DataError("outcome kind must be 'continuous' or 'binary'")
    y = read_outcome_csv(outcome_path, ref)
    return ds, OutcomeSpec(outcome_kind, y)


def write_matrix_csv(path, mat, row_ids, col_ids, header_label="feature"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([header_label, *col_ids])
        for rid, row in zip(row_ids, np.asarray(mat)):
            w.writerow([rid, *("NA" if np.isnan(v) else repr(float(v)) for v in row)])


def center_rows(ds: MultiOmicDataset) -> MultiOmicDataset:
    """Subtract per-feature means computed over observed entries."""
    out, means = [], []
    for s, x in enumerate(ds.sources):
        obs = ~np.isnan(x)
        if not obs.any(axis=1).all():
            raise DataError(f"source {s} has a fully missing feature row")
        mu = np.nanmean(x, axis=1)
        out.append(x - mu[:, None])
        means.append(ds.scaling.row_means[s] + mu * ds.scaling.noise_sd[s])
    meta = ScalingMeta(means, list(ds.scaling.noise_sd), True, ds.scaling.scaled)
    return ds.with_sources(out, meta)


@lru_cache(maxsize=256)
def mp_median(beta: float) -> float:
    """Median of the Marchenko-Pastur law with aspect ratio ``0 < beta <= 1``."""
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    lo = (1 - math.sqrt(beta)) ** 2
    hi = (1 + math.sqrt(beta)) ** 2
    width = hi - lo

    # t = lo + width * sin^2(th) removes the square-root endpoint singularities
    def dens(th):
        s2, c2 = math.sin(th) ** 2, math.cos(th) ** 2
        if lo == 0.0:
            return width * c2 / (math.pi * beta)
        return width ** 2 * s2 * c2 / (math.pi * beta * (lo + width * s2))

    def cdf_minus_half(th):
        return integrate.quad(dens, 0.0, th, epsabs=1e-13, epsrel=1e-12)[0] - 0.5

    th = optimize.brentq(cdf_minus_half, 0.0, math.pi / 2, xtol=1e-13)
    return lo + width * math.sin(th) ** 2


def estimate_noise_sd(mat) -> float:
    """Median-singular-value noise level estimate for a matrix of white noise
    plus low-rank signal; missing entries should be zero-filled beforehand."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or min(mat.shape) < 2:
        raise DataError("noise estimation needs a matrix with min dimension >= 2")
    if not np.any(mat):
        raise DataError("cannot estimate noise level of an all-zero matrix")
    m, n = sorted(mat.shape)
    sv = np.linalg.svd(mat, compute_uv=False)
    return float(np.median(sv) / math.sqrt(n * mp_median(m / n)))


def scale_to_unit_error(ds: MultiOmicDataset) -> MultiOmicDataset:
    """Divide each source by its estimated noise standard deviation."""
    out, sds = [], []
    for s, x in enumerate(ds.sources):
        sd = estimate_noise_sd(np.where(np.isnan(x), 0.0, x))
        out.append(x / sd)
        sds.append(ds.scaling.noise_sd[s] * sd)
    meta = ScalingMeta(list(ds.scaling.row_means), sds, ds.scaling.centered, True)
    return ds.with_sources(out, meta)


def preprocess(ds: MultiOmicDataset) -> MultiOmicDataset:
    return scale_to_unit_error(center_rows(ds))
