import csv
import json
import numpy as np
import pytest

from bsfp.bundled import bundled_paths
from bsfp.cli import main, sha256

SOURCES, OUTCOME = bundled_paths()
DATA = ",".join(str(p) for p in SOURCES)
QUICK = ["--iters", "40", "--burnin", "20", "--seed", "3"]


def _read(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return str(path)


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    code = main(["fit", "--data", DATA, "--outcome", str(OUTCOME),
                 "--outcome-type", "continuous", *QUICK, "--out", str(out)])
    assert code == 0
    return out


def test_fit_artifacts(fitted):
    for rel in ["manifest.json", "chain/chain.json", "chain/V.npy", "chain/data.npz",
                "aligned/alignment_audit.json", "summary/structures.csv",
                "summary/heatmap_long.csv", "summary/variance_explained.csv",
                "summary/beta.csv", "summary/tau_sq.csv", "summary/predictions.csv"]:
        assert (fitted / rel).exists(), rel
    man = json.loads((fitted / "manifest.json").read_text())
    assert man["command"] == "fit" and man["seed"] == 3
    for path, digest in man["input_digests"].items():
        assert sha256(path) == digest
    assert str(OUTCOME) in man["input_digests"]
    ve = _read(fitted / "summary" / "variance_explained.csv")
    assert {r["component"] for r in ve} >= {"joint", "indiv"}


def test_fit_is_deterministic(fitted, tmp_path):
    assert main(["fit", "--data", DATA, "--outcome", str(OUTCOME), "--outcome-type",
                 "continuous", *QUICK, "--out", str(tmp_path)]) == 0
    for f in sorted((fitted / "summary").glob("*.csv")):
        assert f.read_bytes() == (tmp_path / "summary" / f.name).read_bytes(), f.name


def test_align_and_summarize_from_chain(fitted, tmp_path):
    assert main(["align", "--chain", str(fitted / "chain"), "--out", str(tmp_path / "a")]) == 0
    audit = json.loads((tmp_path / "a" / "alignment_audit.json").read_text())
    assert "joint" in audit["pivot_index"]
    assert main(["summarize", "--chain", str(fitted / "chain"),
                 "--out", str(tmp_path / "s")]) == 0
    # summarize on the saved chain reproduces the fit's own summaries
    for name in ("structures.csv", "beta.csv", "variance_explained.csv"):
        assert (tmp_path / "s" / name).read_bytes() == \
            (fitted / "summary" / name).read_bytes()
    assert main(["summarize", "--chain", str(fitted / "chain"), "--no-align",
                 "--clusters", "2", "--out", str(tmp_path / "r")]) == 0
    co = np.loadtxt(tmp_path / "r" / "coclustering.csv", delimiter=",", skiprows=1,
                    usecols=range(1, 53))
    np.testing.assert_allclose(np.diag(co), 1.0)


def test_usage_errors(tmp_path):
    assert main(["fit", "--data", DATA, "--outcome", str(OUTCOME), *QUICK,
                 "--out", str(tmp_path)]) == 2
    assert main(["fit", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 2
    assert main(["nonsense"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text(json.dumps({"kind": "validation", "dims": [5], "n": 1}))
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--out", str(tmp_path)]) == 2
    assert main(["align", "--chain", str(tmp_path), "--out", str(tmp_path / "x")]) == 2


def test_decompose_outputs(tmp_path):
    assert main(["decompose", "--data", DATA, "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "mode.json").read_text())
    assert res["converged"] and res["ranks"]["joint"] >= 1
    tr = res["objective_trace"]
    assert all(b <= a * (1 + 1e-10) for a, b in zip(tr, tr[1:]))
    V = _read(tmp_path / "V.csv")
    assert len(V) == 52 and len(V[0]) == 1 + res["ranks"]["joint"]


def test_decompose_noise_only(tmp_path):
    assert main(["decompose", "--noise-only", "--seeds", "5", "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "noise_only.json").read_text())
    assert res["seeds"] == 5 and len(res["ranks"]) == 5 and 0 <= res["all_zero"] <= 5


def _masked_inputs(tmp_path, kind):
    rng = np.random.default_rng(0)
    n, ids = 20, [f"s{i}" for i in range(20)]
    v = rng.normal(size=n)
    srcs = []
    for s, p in enumerate((8, 6)):
        x = np.outer(rng.normal(size=p) * 3, v) + rng.normal(size=(p, n))
        rows = [[f"f{s}_{j}"] + [("NA" if (s == 0 and j == 0 and i < 2) else repr(float(x[j, i])))
                                 for i in range(n)] for j in range(p)]
        srcs.append(_write_csv(tmp_path / f"x{s}.csv", ["feature"] + ids, rows))
    y = v + 0.3 * rng.normal(size=n)
    if kind == "binary":
        # labels only weakly tied to the scores so the probit fit is not separable
        y = (0.3 * v + rng.normal(size=n) > 0).astype(float)
    yrows = [[sid, "" if i in (3, 7) else repr(float(val))] for i, (sid, val) in
             enumerate(zip(ids, y))]
    return ",".join(srcs), _write_csv(tmp_path / "y.csv", ["sample", "y"], yrows)


@pytest.mark.parametrize("kind", ["continuous", "binary"])
def test_predict_masked_outcome(tmp_path, kind):
    data, y = _masked_inputs(tmp_path, kind)
    # a vague intercept prior starts the probit chain far out; a short chain
    # needs the tighter study prior to leave that transient
    assert main(["predict", "--data", data, "--outcome", y, "--outcome-type", kind,
                 "--alpha0-sq", "10", *QUICK, "--out", str(tmp_path / "p")]) == 0
    rows = _read(tmp_path / "p" / "predictions.csv")
    assert [r["sample"] for r in rows] == ["s3", "s7"]
    for r in rows:
        lo, hi, m = float(r["lower"]), float(r["upper"]), float(r["mean"])
        assert hi > lo and lo <= m <= hi
        if kind == "binary":
            assert 0 <= lo and hi <= 1
            assert {r["pred_lower"], r["pred_upper"]} <= {"0.0", "1.0"}


def test_predict_fully_observed_is_empty(tmp_path, caplog):
    assert main(["predict", "--data", DATA, "--outcome", str(OUTCOME), "--outcome-type",
                 "continuous", *QUICK, "--out", str(tmp_path)]) == 0
    assert _read(tmp_path / "predictions.csv") == []
    assert "nothing to predict" in caplog.text


def test_impute_writes_completed_sources(tmp_path):
    data, _ = _masked_inputs(tmp_path, "continuous")
    assert main(["impute", "--data", data, *QUICK, "--out", str(tmp_path / "i")]) == 0
    rows = _read(tmp_path / "i" / "imputations.csv")
    assert len(rows) == 2 and {r["sample"] for r in rows} == {"s0", "s1"}
    filled = (tmp_path / "i" / "imputed_source1.csv").read_text()
    assert "NA" not in filled


def test_simulate_preset_emits_report(tmp_path):
    assert main(["--threads", "1", "simulate", "--preset", "validation-desk",
                 "--replications", "1", "--iters", "30", "--burnin", "10",
                 "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["config"]["replications"] == 1
    assert "J_coverage" in rep["aggregates"][0]["metrics"]
    assert (tmp_path / "replicates.csv").exists() and (tmp_path / "manifest.json").exists()
