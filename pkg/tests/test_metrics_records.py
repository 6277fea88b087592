import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_auc
from stosca.metrics import compute_mse, compute_roc_auc, mean_std, summarize
from stosca.records import RunRecord


def test_mse_examples(rng):
    assert compute_mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert compute_mse([0.0], [1.0]) == 1.0
    p, t = rng.standard_normal(100), rng.standard_normal(100)
    total = 0.0
    for a, b in zip(p, t):
        total += (a - b) ** 2
    assert compute_mse(p, t) == pytest.approx(total / 100, rel=1e-15, abs=1e-15)
    with pytest.raises(ValueError):
        compute_mse([], [])


def test_auc_examples():
    assert compute_roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])[1] == 1.0
    assert compute_roc_auc([0.5] * 6, [0, 1, 0, 1, 1, 0])[1] == 0.5
    with pytest.raises(ValueError):
        compute_roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 100), ties=st.booleans())
def test_auc_matches_pairwise_oracle(seed, n, ties):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = rng.integers(0, 5, n).astype(float) if ties else rng.standard_normal(n)
    (fpr, tpr), auc = compute_roc_auc(s, y)
    assert auc == pytest.approx(brute_auc(s, y), abs=1e-12)
    area = np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2)
    assert area == pytest.approx(auc, abs=1e-12)
    assert fpr[0] == tpr[0] == 0.0 and fpr[-1] == tpr[-1] == 1.0


def test_mean_std_examples():
    assert mean_std([0.4]) == (0.4, 0.0)
    m, s = mean_std([0.1, 0.3])
    assert m == pytest.approx(0.2) and s == pytest.approx(0.1414, abs=1e-4)


def _record(name, seed, objs, metric):
    r = RunRecord(name, seed, initial_objective=1.0, metrics={"mse": metric})
    for i, o in enumerate(objs, 1):
        r.add(i, o, 10.0 * i)
    return r


def test_summarize_table_and_bands():
    recs = [_record("a", 0, [0.5, 0.1], 0.1), _record("a", 1, [0.7, 0.3], 0.3), _record("b", 0, [0.9, 0.8], 0.5)]
    recs.append(RunRecord("b", 1, status="failed"))
    table, bands = summarize(recs)
    a = table[0]
    assert a["optimizer"] == "a" and a["runs"] == 2
    assert a["mean"] == pytest.approx(0.2) and a["std"] == pytest.approx(0.1414, abs=1e-4)
    iters, mean, std = bands["a"]
    assert iters.tolist() == [1, 2]
    np.testing.assert_allclose(mean, [0.6, 0.2])
    assert table[1]["runs"] == 1 and table[1]["std"] == 0.0


def test_record_roundtrip(tmp_path):
    r = _record("sca", 3, [0.25, 0.125, 1 / 3], 0.05)
    r.write(tmp_path)
    assert (tmp_path / "sca_seed3.csv").read_text().splitlines()[0] == "iteration,objective,wall_ms"
    back = RunRecord.read(tmp_path / "sca_seed3.csv")
    assert back == r


def test_record_iterations_strictly_increasing():
    r = RunRecord("x", 0)
    r.add(1, 0.5, 1.0)
    with pytest.raises(ValueError):
        r.add(1, 0.4, 2.0)
