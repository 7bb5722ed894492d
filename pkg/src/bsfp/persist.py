"""On-disk layout for datasets and chains.

A chain directory holds one ``.npy`` file per parameter block (leading axis =
iteration), ``chain.json`` with run metadata, ``log_joint.csv`` and
``data.npz`` with the dataset the sampler saw.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .data import MultiOmicDataset, ScalingMeta
from .gibbs import PosteriorSamples, PriorSpec


def save_dataset(path, ds: MultiOmicDataset):
    arrays = {f"source_{s}": x for s, x in enumerate(ds.sources)}
    for s in range(ds.q):
        arrays[f"row_means_{s}"] = ds.scaling.row_means[s]
        arrays[f"feature_ids_{s}"] = np.array(ds.feature_ids[s], dtype=str)
    np.savez(path, sample_ids=np.array(ds.sample_ids, dtype=str),
             noise_sd=np.array(ds.scaling.noise_sd, dtype=float),
             flags=np.array([ds.scaling.centered, ds.scaling.scaled]), q=ds.q, **arrays)


def load_saved_dataset(path) -> MultiOmicDataset:
    with np.load(path) as z:
        q = int(z["q"])
        meta = ScalingMeta([z[f"row_means_{s}"] for s in range(q)],
                           [float(v) for v in z["noise_sd"]],
                           bool(z["flags"][0]), bool(z["flags"][1]))
        return MultiOmicDataset([z[f"source_{s}"] for s in range(q)],
                                [str(v) for v in z["sample_ids"]],
                                [[str(v) for v in z[f"feature_ids_{s}"]] for s in range(q)],
                                meta)


_OPTIONAL = ("beta", "tau_sq", "z", "imputed_y", "y_mask", "y_values")


def save_chain(directory, chain: PosteriorSamples, ds: MultiOmicDataset | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "V.npy", chain.V)
    for s in range(chain.q):
        np.save(d / f"U_{s}.npy", chain.U[s])
        np.save(d / f"Vs_{s}.npy", chain.Vs[s])
        np.save(d / f"W_{s}.npy", chain.W[s])
        np.save(d / f"imputed_X_{s}.npy", chain.imputed_X[s])
        np.save(d / f"mask_{s}.npy", chain.masks[s])
    for name in _OPTIONAL:
        val = getattr(chain, name)
        if val is not None:
            np.save(d / f"{name}.npy", val)
    with open(d / "log_joint.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "log_joint"])
        for t, v in enumerate(chain.log_joint):
            w.writerow([t, repr(float(v))])
    meta = dict(chain.meta)
    meta.update(q=chain.q, burn_in=chain.burn_in, seed=chain.seed,
                outcome_kind=chain.outcome_kind, prior=chain.prior.as_dict(),
                iters=len(chain))
    with open(d / "chain.json", "w") as fh:
        json.dump(meta, fh, indent=2)
    if ds is not None:
        save_dataset(d / "data.npz", ds)


def load_chain(directory):
    """Return ``(PosteriorSamples, dataset or None)``."""
    d = Path(directory)
    if not (d / "chain.json").exists():
        raise FileNotFoundError(f"{d} is not a chain directory (no chain.json)")
    with open(d / "chain.json") as fh:
        meta = json.load(fh)
    q = meta["q"]
    ld = lambda name: np.load(d / f"{name}.npy")
    opt = {k: (ld(k) if (d / f"{k}.npy").exists() else None) for k in _OPTIONAL}
    with open(d / "log_joint.csv") as fh:
        lj = np.array([float(r["log_joint"]) for r in csv.DictReader(fh)])
    prior = PriorSpec(**meta["prior"])
    chain = PosteriorSamples(
        ld("V"), [ld(f"U_{s}") for s in range(q)], [ld(f"Vs_{s}") for s in range(q)],
        [ld(f"W_{s}") for s in range(q)], [ld(f"imputed_X_{s}") for s in range(q)],
        lj, meta["burn_in"], meta.get("seed"), prior, meta["outcome_kind"],
        opt["beta"], opt["tau_sq"], opt["z"], opt["imputed_y"],
        [ld(f"mask_{s}") for s in range(q)], opt["y_mask"], opt["y_values"],
        {k: v for k, v in meta.items() if k not in ("q",)})
    ds = load_saved_dataset(d / "data.npz") if (d / "data.npz").exists() else None
    return chain, ds
