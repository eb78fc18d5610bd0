"""Real vs generated comparison: summaries, PCA projection, Tukey HSD, reports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .morphometry import PARAM_NAMES, PARAM_UNITS, ParamVector

UNITS = dict(zip(PARAM_NAMES, PARAM_UNITS))

GROUP_LABELS = ("real", "gan", "wgan_gp", "pwgan_gp", "wgan_clip")


class DegenerateGroupsError(ValueError):
    """All groups have zero within-group variance, so the test is undefined."""


@dataclass
class GroupSample:
    label: str
    params: np.ndarray  # (n, 7), NaN for undefined parameters

    def __post_init__(self):
        if isinstance(self.params, (list, tuple)) and self.params and isinstance(self.params[0], ParamVector):
            self.params = np.stack([p.as_array() for p in self.params])
        self.params = np.atleast_2d(np.asarray(self.params, dtype=np.float64))
        if self.params.shape[0] == 0:
            raise ValueError(f"group {self.label!r} is empty")
        if self.params.shape[1] != len(PARAM_NAMES):
            raise ValueError(f"expected {len(PARAM_NAMES)} parameters, got {self.params.shape[1]}")

    def column(self, parameter: str) -> np.ndarray:
        col = self.params[:, PARAM_NAMES.index(parameter)]
        return col[np.isfinite(col)]


class ParamPCA(TransformerMixin, BaseEstimator):
    """PCA on parameters z-scored against the real group.

    The standardization is fitted once on real data and reused for every
    projection, so generated groups land in the real group's frame.
    """

    def __init__(self, n_components=2, columns: Optional[Sequence[str]] = None):
        self.n_components = n_components
        self.columns = columns

    def _select(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.columns is None:
            return X
        return X[:, [PARAM_NAMES.index(c) for c in self.columns]]

    def fit(self, X, y=None):
        X = self._select(X)
        X = X[np.all(np.isfinite(X), axis=1)]
        n, p = X.shape
        k = self.n_components
        if n < k + 1 or p < k:
            raise ValueError(f"need at least {k + 1} samples and {k} parameters, got {n}x{p}")
        self.mean_ = X.mean(axis=0)
        sd = X.std(axis=0, ddof=1)
        self.scale_ = np.where(sd > 0, sd, 1.0)
        Z = (X - self.mean_) / self.scale_
        evals, evecs = np.linalg.eigh(np.cov(Z, rowvar=False))
        order = np.argsort(evals)[::-1]
        evals = np.clip(evals[order], 0.0, None)
        evecs = evecs[:, order]
        # deterministic sign: largest-magnitude loading positive
        signs = np.sign(evecs[np.abs(evecs).argmax(axis=0), np.arange(p)])
        evecs = evecs * np.where(signs == 0, 1, signs)
        total = evals.sum()
        if total <= 0 or np.count_nonzero(evals > 1e-12 * total) < k:
            raise ValueError(f"standardized data has rank below {k}")
        self.all_components_ = evecs.T
        self.all_explained_variance_ratio_ = evals / total
        self.components_ = evecs[:, :k].T
        self.explained_variance_ratio_ = self.all_explained_variance_ratio_[:k]
        self.cumulative_explained_variance_ = float(self.explained_variance_ratio_.sum())
        return self

    def standardize(self, X):
        check_is_fitted(self, "components_")
        return (self._select(X) - self.mean_) / self.scale_

    def transform(self, X):
        return self.standardize(X) @ self.components_.T

    def inverse_transform(self, Y, full_rank=False):
        comps = self.all_components_[: Y.shape[1]] if full_rank else self.components_
        return Y @ comps * self.scale_ + self.mean_


def pca_project(model: ParamPCA, params) -> np.ndarray:
    return model.transform(params)


@dataclass
class TukeyResult:
    parameter: str
    labels: list
    pvalues: np.ndarray  # (g, g), symmetric, 1 on the diagonal
    alpha: float

    @property
    def significant(self) -> np.ndarray:
        return self.pvalues < self.alpha

    def p(self, a: str, b: str) -> float:
        return float(self.pvalues[self.labels.index(a), self.labels.index(b)])


def tukey_test(groups: Sequence[GroupSample], parameter: str, alpha: float = 0.05) -> TukeyResult:
    """Tukey HSD over all groups as one family (pooled within-group MSE)."""
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    samples = [g.column(parameter) for g in groups]
    for g, s in zip(groups, samples):
        if s.size < 2:
            raise ValueError(f"group {g.label!r} has fewer than two values for {parameter}")
    if all(np.ptp(s) == 0 for s in samples):
        raise DegenerateGroupsError(f"{parameter}: every group has zero variance")
    res = stats.tukey_hsd(*samples)
    p = np.array(res.pvalue, dtype=np.float64)
    p = np.minimum(np.maximum(p, p.T), 1.0)
    np.fill_diagonal(p, 1.0)
    return TukeyResult(parameter, [g.label for g in groups], p, alpha)


def _mean_sd(values: np.ndarray):
    if values.size == 0:
        return float("nan"), float("nan")
    return float(values.mean()), float(values.std(ddof=1)) if values.size > 1 else 0.0


def summary_table(groups: Sequence[GroupSample], alpha: float = 0.05) -> list:
    """Rows of ``parameter, group, mean, sd, p_vs_real, significant``."""
    labels = [g.label for g in groups]
    if "real" not in labels:
        raise ValueError("a 'real' group is required")
    rows = []
    for name in PARAM_NAMES:
        try:
            tk = tukey_test(groups, name, alpha)
        except DegenerateGroupsError:
            tk = None
        for g in groups:
            mean, sd = _mean_sd(g.column(name))
            if g.label == "real":
                p = None
            elif tk is None:
                # constant groups: equal constants cannot differ, distinct ones always do
                real_value = groups[labels.index("real")].column(name)[:1]
                p = 1.0 if np.array_equal(g.column(name)[:1], real_value) else 0.0
            else:
                p = tk.p("real", g.label)
            rows.append({"parameter": name, "unit": UNITS[name], "group": g.label, "mean": mean, "sd": sd,
                         "p_vs_real": p, "significant": None if p is None else bool(p < alpha)})
    return rows


def _fmt(v, digits=4):
    return "" if v is None else f"{v:.{digits}g}"


def table_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["parameter", "unit", "group", "mean", "sd", "p_vs_real", "significant"])
    for r in rows:
        w.writerow([r["parameter"], r["unit"], r["group"], _fmt(r["mean"]), _fmt(r["sd"]),
                    _fmt(r["p_vs_real"]), "" if r["significant"] is None else int(r["significant"])])
    return buf.getvalue()


def table_markdown(rows) -> str:
    """Parameters as rows, groups as columns; non-significant p-values in bold."""
    groups = list(dict.fromkeys(r["group"] for r in rows))
    lines = ["| parameter | " + " | ".join(groups) + " |", "|" + "---|" * (len(groups) + 1)]
    for name in PARAM_NAMES:
        cells = []
        for g in groups:
            r = next(x for x in rows if x["parameter"] == name and x["group"] == g)
            cell = f"{_fmt(r['mean'])} ± {_fmt(r['sd'])}"
            if r["p_vs_real"] is not None:
                p = f"p={_fmt(r['p_vs_real'])}"
                cell += f" ({'**' + p + '**' if not r['significant'] else p})"
            cells.append(cell)
        lines.append(f"| {name} [{UNITS[name]}] | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def pc_scatter_csv(model: ParamPCA, groups: Sequence[GroupSample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "pc1", "pc2"])
    for g in groups:
        X = g.params[np.all(np.isfinite(model._select(g.params)), axis=1)]
        for pc in model.transform(X):
            w.writerow([g.label, f"{pc[0]:.6g}", f"{pc[1]:.6g}"])
    return buf.getvalue()


def summary_report(groups: Sequence[GroupSample], out_dir=None, alpha: float = 0.05,
                   pca_columns: Optional[Sequence[str]] = None) -> dict:
    """Build the comparison table and PC scatter; write them if ``out_dir`` is set."""
    labels = [g.label for g in groups]
    if "real" not in labels:
        raise ValueError("a 'real' group is required")
    rows = summary_table(groups, alpha)
    pca = ParamPCA(2, pca_columns).fit(groups[labels.index("real")].params)
    report = {
        "rows": rows,
        "csv": table_csv(rows),
        "markdown": table_markdown(rows),
        "pc_scatter": pc_scatter_csv(pca, groups),
        "explained_variance_ratio": pca.explained_variance_ratio_.tolist(),
        "pca": pca,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.csv").write_text(report["csv"])
        ev = ", ".join(f"{v:.3f}" for v in report["explained_variance_ratio"])
        (out / "summary.md").write_text(report["markdown"] + f"\nPC explained variance (real): {ev}\n")
        (out / "pc_scatter.csv").write_text(report["pc_scatter"])
    return report
