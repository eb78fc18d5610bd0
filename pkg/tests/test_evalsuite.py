import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.decomposition import PCA

from spongiosa import evalsuite as ev
from spongiosa.morphometry import PARAM_NAMES, ParamVector

from oracles import tukey_kramer_p


def group(label, values, col="bmd"):
    values = np.asarray(values, dtype=float)
    params = np.tile(np.arange(1.0, 8.0), (len(values), 1))
    params[:, PARAM_NAMES.index(col)] = values
    return ev.GroupSample(label, params)


def test_group_sample_validation():
    with pytest.raises(ValueError):
        ev.GroupSample("real", np.zeros((0, 7)))
    with pytest.raises(ValueError):
        ev.GroupSample("real", np.zeros((3, 6)))
    g = ev.GroupSample("real", [ParamVector(1, 2, 0.1, None, 1, 1, 100), ParamVector(3, 2, 0.1, 300, 1, 1, 100)])
    assert g.params.shape == (2, 7)
    np.testing.assert_array_equal(g.column("tmd"), [300.0])


FIXTURES = [
    [[1.2, 3.4, 2.2, 2.9], [2.5, 4.1, 3.3], [0.4, 1.1, 1.9, 0.7, 1.3]],
    [[10.0, 11.5, 9.2], [12.1, 13.3, 12.8, 11.9], [10.4, 10.9, 11.7], [14.2, 13.1, 15.0]],
    [[0.1, 0.4, -0.3, 0.2, 0.0, 0.35], [0.9, 1.4, 0.7, 1.2, 1.1, 0.6]],
]


@pytest.mark.parametrize("data", FIXTURES)
def test_tukey_matches_oracle(data):
    groups = [group(f"g{i}", d) for i, d in enumerate(data)]
    res = ev.tukey_test(groups, "bmd")
    for i in range(len(data)):
        for j in range(i + 1, len(data)):
            assert abs(res.pvalues[i, j] - tukey_kramer_p(data, i, j)) <= 1e-3


def test_tukey_identical_groups():
    vals = np.random.default_rng(0).normal(size=30)
    res = ev.tukey_test([group("real", vals), group("gan", vals)], "bmd")
    assert res.p("real", "gan") == pytest.approx(1.0, abs=1e-9)
    assert not res.significant[0, 1]


def test_tukey_separated_groups():
    rng = np.random.default_rng(1)
    a = rng.normal(0, 1, 100)
    b = rng.normal(10, 1, 100)
    res = ev.tukey_test([group("real", a), group("gan", b)], "bmd")
    assert res.p("real", "gan") < 1e-4 and res.significant[0, 1]


def test_tukey_symmetric_and_relabel_invariant():
    rng = np.random.default_rng(2)
    data = [rng.normal(m, 1, 12) for m in (0, 0.5, 1.0)]
    res = ev.tukey_test([group(str(i), d) for i, d in enumerate(data)], "bmd")
    np.testing.assert_allclose(res.pvalues, res.pvalues.T)
    perm = [2, 0, 1]
    res2 = ev.tukey_test([group(str(i), data[i]) for i in perm], "bmd")
    for a in "012":
        for b in "012":
            assert res2.p(a, b) == pytest.approx(res.p(a, b), abs=1e-12)


def test_tukey_errors():
    with pytest.raises(ev.DegenerateGroupsError):
        ev.tukey_test([group("real", [1, 1, 1]), group("gan", [2, 2])], "bmd")
    with pytest.raises(ValueError):
        ev.tukey_test([group("real", [1, 2])], "bmd")
    with pytest.raises(ValueError):
        ev.tukey_test([group("real", [1, 2]), group("gan", [1])], "bmd")


def planar(n=50, seed=0):
    rng = np.random.default_rng(seed)
    basis = rng.normal(size=(2, 7))
    return rng.normal(size=(n, 2)) @ basis + rng.normal(size=7) * 10


def test_pca_planar_full_variance():
    pca = ev.ParamPCA(2).fit(planar())
    assert pca.cumulative_explained_variance_ == pytest.approx(1.0, abs=1e-12)


def test_pca_isotropic():
    X = np.random.default_rng(3).normal(size=(20000, 7))
    pca = ev.ParamPCA(2).fit(X)
    np.testing.assert_allclose(pca.all_explained_variance_ratio_, 1 / 7, atol=0.01)


def test_pca_matches_sklearn():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(200, 7)) @ rng.normal(size=(7, 7)) + rng.normal(size=7)
    pca = ev.ParamPCA(2).fit(X)
    Z = (X - X.mean(0)) / X.std(0, ddof=1)
    ref = PCA(2).fit(Z)
    np.testing.assert_allclose(pca.explained_variance_ratio_, ref.explained_variance_ratio_, rtol=1e-9)
    np.testing.assert_allclose(np.abs(pca.transform(X)), np.abs(ref.transform(Z)), atol=1e-9)


def test_pca_properties():
    X = np.random.default_rng(5).normal(size=(40, 7)) * np.arange(1, 8)
    pca = ev.ParamPCA(3).fit(X)
    r = pca.all_explained_variance_ratio_
    assert r.sum() <= 1 + 1e-12 and np.all(np.diff(r) <= 1e-15) and np.all((r >= 0) & (r <= 1))
    np.testing.assert_allclose(pca.components_ @ pca.components_.T, np.eye(3), atol=1e-12)
    assert np.allclose(pca.transform(X.mean(axis=0)[None]), 0, atol=1e-12)
    full = ev.ParamPCA(7).fit(X)
    np.testing.assert_allclose(full.inverse_transform(full.transform(X), full_rank=True), X, atol=1e-10)
    a, b = pca.transform(X[:1]), pca.transform(X[:1].copy())
    np.testing.assert_array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.integers(0, 39), st.integers(0, 39))
def test_pca_affine(a, i, j):
    X = np.random.default_rng(6).normal(size=(40, 7))
    pca = ev.ParamPCA(2).fit(X)
    mix = pca.transform((a * X[i] + (1 - a) * X[j])[None])
    np.testing.assert_allclose(mix, a * pca.transform(X[i:i + 1]) + (1 - a) * pca.transform(X[j:j + 1]),
                               atol=1e-9)


def test_pca_uses_real_moments_only():
    real = np.random.default_rng(7).normal(size=(30, 7))
    pca = ev.ParamPCA(2).fit(real)
    mean = pca.mean_.copy()
    pca.transform(real * 100)
    np.testing.assert_array_equal(pca.mean_, mean)


def test_pca_errors():
    with pytest.raises(ValueError):
        ev.ParamPCA(2).fit(np.zeros((2, 7)))
    with pytest.raises(ValueError):
        ev.ParamPCA(2).fit(np.outer(np.arange(10.0), np.ones(7)))
    with pytest.raises(Exception):
        ev.ParamPCA(2).transform(np.zeros((1, 7)))
    sub = ev.ParamPCA(2, columns=["bmd", "bvtv", "tmd"]).fit(np.random.default_rng(8).normal(size=(10, 7)))
    assert sub.components_.shape == (2, 3)


def _groups(seed=0, same=False):
    rng = np.random.default_rng(seed)
    real = rng.normal(size=(40, 7)) * [36, 10, 0.05, 20, 0.2, 0.2, 30] + [120, 125, 0.19, 340, 1.2, 1.0, 200]
    out = [ev.GroupSample("real", real)]
    for i, label in enumerate(("gan", "wgan_gp", "pwgan_gp")):
        out.append(ev.GroupSample(label, real if same else real + rng.normal(size=real.shape) * 5 * i))
    return out


def test_summary_report_schema(tmp_path):
    rep = ev.summary_report(_groups(), tmp_path)
    rows = rep["rows"]
    assert len(rows) == 7 * 4
    assert [r["parameter"] for r in rows[::4]] == list(PARAM_NAMES)
    assert all(r["p_vs_real"] is None for r in rows if r["group"] == "real")
    md = (tmp_path / "summary.md").read_text().splitlines()
    assert md[0] == "| parameter | real | gan | wgan_gp | pwgan_gp |"
    assert len([ln for ln in md if ln.startswith("| ") and "±" in ln]) == 7
    scatter = (tmp_path / "pc_scatter.csv").read_text().splitlines()
    assert scatter[0] == "group,pc1,pc2" and len(scatter) == 1 + 160


def test_summary_identical_groups_p_one():
    rows = ev.summary_table(_groups(same=True))
    assert all(r["p_vs_real"] == pytest.approx(1.0) for r in rows if r["group"] != "real")
    assert all(r["significant"] is False for r in rows if r["group"] != "real")


def test_csv_and_markdown_agree():
    rows = ev.summary_table(_groups(1))
    csv_lines = ev.table_csv(rows).splitlines()[1:]
    md = ev.table_markdown(rows)
    for line in csv_lines:
        param, unit, grp, mean, sd, p, sig = line.split(",")
        assert f"{mean} ± {sd}" in md
        if p:
            assert (f"**p={p}**" in md) == (sig == "0")


def test_summary_requires_real():
    with pytest.raises(ValueError):
        ev.summary_report([ev.GroupSample("gan", np.ones((3, 7)))])


def test_summary_degenerate_parameter():
    real = np.random.default_rng(2).normal(size=(10, 7))
    real[:, 2] = 0.5
    rows = ev.summary_table([ev.GroupSample("real", real), ev.GroupSample("gan", real.copy())])
    bv = [r for r in rows if r["parameter"] == "bvtv" and r["group"] == "gan"][0]
    assert bv["p_vs_real"] == 1.0
