"""Small synthetic two-source dataset shipped with the package.

Shape mirrors a typical paired metabolome/proteome study: 120 and 400
features on 52 samples, with a continuous outcome.  Sources have nonzero
feature means and different noise levels so preprocessing matters.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import write_matrix_csv

DATA_DIR = Path(__file__).parent / "data"
DIMS = (120, 400)
N = 52
RANKS = (2, [2, 3])
NOISE_SD = (0.5, 2.0)
SEED = 20240052


def make_bundled(seed=SEED):
    """Return ``(sources, y, sample_ids, feature_ids)`` in original units."""
    from .sim.generate import generate_factorization_data

    rng = np.random.default_rng(seed)
    _, truth, outcome = generate_factorization_data(
        DIMS, N, RANKS, rng, "continuous", s2n_x=1.0, s2n_y=3.0)
    sources = []
    for s, x in enumerate(truth.X):
        offset = rng.normal(5.0, 2.0, size=(x.shape[0], 1))
        sources.append(NOISE_SD[s] * x + offset)
    y = outcome.values + 50.0
    sample_ids = [f"P{i:03d}" for i in range(N)]
    feature_ids = [[f"{tag}{j:03d}" for j in range(p)]
                   for tag, p in zip(("met", "prot"), DIMS)]
    return sources, y, sample_ids, feature_ids


def write_bundled(directory=DATA_DIR, seed=SEED):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    sources, y, sids, fids = make_bundled(seed)
    for s, (x, f) in enumerate(zip(sources, fids)):
        write_matrix_csv(d / f"source{s + 1}.csv", x, f, sids)
    with open(d / "outcome.csv", "w") as fh:
        fh.write("sample,y\n")
        for sid, v in zip(sids, y):
            fh.write(f"{sid},{float(v)!r}\n")
    return bundled_paths(d)


def bundled_paths(directory=DATA_DIR):
    """``([source paths], outcome path)`` of the shipped dataset."""
    d = Path(directory)
    return [d / "source1.csv", d / "source2.csv"], d / "outcome.csv"
