"""Cross-year bias estimation and label refinement.

Retrieved samples come from earlier seasons, so their labels are stale
relative to the season being predicted.  This module measures how a
county's label drifts across years and shifts retrieved labels forward:

1.  For every training year s, fit a small regressor g_s from yearly
    embeddings to labels using all counties observed in year s.
2.  For a county i, the bias matrix holds B[s, k] = y_i^k - g_s(z_i^k),
    the gap between year k's label and what year s's map expects.
3.  Each row s is extrapolated with a least-squares line over k to the
    target year, giving a per-sample correction b_hat.
4.  A retrieved label y becomes y + b_hat + sigma * eps with seeded
    Gaussian noise, leaving features untouched.

Labels here are in physical units throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .data import CountyYearRecord
from .numcore import ContractError

_RIDGE_LAM = 1e-3
_SCALE_FLOOR = 1e-12


@dataclass
class YearRegressor:
    """Affine map from standardized embeddings to labels for one year."""

    year: int
    coef: np.ndarray
    intercept: float
    z_mean: np.ndarray
    z_scale: np.ndarray

    def predict(self, Z):
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim == 1:
            Z = Z[None, :]
        if Z.shape[1] != self.coef.shape[0]:
            raise ContractError(
                f"embedding width {Z.shape[1]} does not match regressor width {self.coef.shape[0]}"
            )
        return (Z - self.z_mean) / self.z_scale @ self.coef + self.intercept


class MlpYearRegressor:
    """One-hidden-layer alternative to the affine per-year map."""

    def __init__(self, year, store, z_mean, z_scale):
        self.year = year
        self._store = store
        self.z_mean = z_mean
        self.z_scale = z_scale

    def predict(self, Z):
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim == 1:
            Z = Z[None, :]
        X = (Z - self.z_mean) / self.z_scale
        s = self._store
        h = np.tanh(X @ s.value("g.h.W") + s.value("g.h.b"))
        return (h @ s.value("g.out.W") + s.value("g.out.b"))[:, 0]


def _standardize(Z):
    mean = Z.mean(axis=0)
    scale = Z.std(axis=0)
    scale = np.where(scale < _SCALE_FLOOR, 1.0, scale)
    return (Z - mean) / scale, mean, scale


def embedding_moments(Z):
    """Per-dimension mean and scale of a pooled embedding table.

    Pass the result as `z_mean`/`z_scale` to every per-year fit so the
    regressors for different years share one standardization.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ContractError("expected an embedding table of shape [n, Z] with n >= 2")
    _, mean, scale = _standardize(Z)
    return mean, scale


def _fit_mlp(year, X, y, seed, hidden=16, epochs=300, lr=0.02):
    n, d = X.shape
    rng = np.random.default_rng(seed)
    store = nc.ParamStore()
    store.add("g.h.W", rng.normal(0.0, 1.0 / np.sqrt(d), (d, hidden)))
    store.add("g.h.b", np.zeros(hidden))
    store.add("g.out.W", rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, 1)))
    store.add("g.out.b", np.array([float(y.mean())]))
    target = nc.Tensor(y)
    xt = nc.Tensor(X)
    m = {name: np.zeros_like(store.value(name)) for name in store.names()}
    v = {name: np.zeros_like(store.value(name)) for name in store.names()}
    for step in range(1, epochs + 1):
        tape = nc.ComputeTape()
        h = nc.tanh(nc.add_bias(nc.matmul(xt, tape.bind(tape, store, "g.h.W")),
                                tape.bind(tape, store, "g.h.b")))
        pred = nc.add_bias(nc.matmul(h, tape.bind(tape, store, "g.out.W")),
                           tape.bind(tape, store, "g.out.b"))
        loss = nc.mse_loss(nc.reshape(pred, (n,)), target)
        store.zero_grad()
        nc.backward(tape, loss)
        for name in store.names():
            g = store.grad(name)
            m[name] = 0.9 * m[name] + 0.1 * g
            v[name] = 0.999 * v[name] + 0.001 * g * g
            mhat = m[name] / (1.0 - 0.9 ** step)
            vhat = v[name] / (1.0 - 0.999 ** step)
            store.set_value(name, store.value(name) - lr * mhat / (np.sqrt(vhat) + 1e-8))
    return store


def fit_year_regressor(year, Z, y, lam=_RIDGE_LAM, family="ridge", seed=0,
                       z_mean=None, z_scale=None):
    """Fit the year-s map g_s on all (embedding, label) pairs from year s.

    Embeddings are standardized per dimension before fitting; the
    intercept is left unpenalized by centering the targets, which makes
    the mean in-year residual exactly zero for the ridge family.

    By default the standardization statistics come from the fitted
    year's own embeddings. Callers that evaluate g_s on other years'
    embeddings should pass shared `z_mean`/`z_scale` (for example,
    moments over all training years) so that fit and evaluation use
    one consistent scale; a dimension that barely varies within one
    year would otherwise get a huge per-year gain that amplifies
    ordinary cross-year shifts into wild extrapolations.
    """
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if Z.ndim != 2 or y.ndim != 1 or Z.shape[0] != y.shape[0]:
        raise ContractError("expected Z of shape [n, Z] and y of shape [n]")
    n = Z.shape[0]
    if n < 2:
        raise ContractError(f"year {year} has {n} samples, need at least 2 to fit")
    if (z_mean is None) != (z_scale is None):
        raise ContractError("z_mean and z_scale must be passed together")
    if z_mean is not None:
        z_mean = np.asarray(z_mean, dtype=np.float64)
        z_scale = np.asarray(z_scale, dtype=np.float64)
        if z_mean.shape != (Z.shape[1],) or z_scale.shape != (Z.shape[1],):
            raise ContractError("z_mean and z_scale must have shape [Z]")
        # keep the shared scale but absorb this year's mean into the
        # stored offset, so the design matrix is centered (the intercept
        # carries the year level) while evaluation on any year's
        # embeddings still uses one common scale
        x_bar = (Z - z_mean).mean(axis=0) / z_scale
        z_mean = z_mean + x_bar * z_scale
        X = (Z - z_mean) / z_scale
    else:
        X, z_mean, z_scale = _standardize(Z)
    if family == "mlp":
        store = _fit_mlp(year, X, y, seed)
        return MlpYearRegressor(year, store, z_mean, z_scale)
    if family != "ridge":
        raise ContractError(f"unknown regressor family {family!r}")
    y_mean = float(y.mean())
    yc = y - y_mean
    A = X.T @ X + lam * np.eye(X.shape[1])
    coef = np.linalg.solve(A, X.T @ yc)
    return YearRegressor(year=year, coef=coef, intercept=y_mean, z_mean=z_mean, z_scale=z_scale)


@dataclass
class BiasMatrix:
    """Per-county grid of cross-year label gaps.

    B[s, k] holds y^k - g_s(z^k) for this county; `years` maps both
    axes to calendar years and `valid` masks cells where either the
    year-s regressor or the year-k observation was unavailable.
    """

    county: str
    years: list
    B: np.ndarray
    valid: np.ndarray


def build_bias_matrix(county, regressors, embeddings, labels):
    """Assemble the bias matrix for one county.

    `regressors` maps year -> fitted g_s, `embeddings` maps year -> z
    vector for this county, `labels` maps year -> physical label.
    """
    years = sorted(set(embeddings) & set(labels))
    if not years:
        raise ContractError(f"county {county}: no years with both embedding and label")
    K = len(years)
    B = np.zeros((K, K))
    valid = np.zeros((K, K), dtype=bool)
    for si, s in enumerate(years):
        g = regressors.get(s)
        if g is None:
            continue
        for ki, k in enumerate(years):
            pred = float(g.predict(embeddings[k][None, :])[0])
            B[si, ki] = labels[k] - pred
            valid[si, ki] = True
    return BiasMatrix(county=county, years=years, B=B, valid=valid)


@dataclass
class BiasEstimate:
    value: float
    method: str  # "ols", "row_mean", or "zero"


def extrapolate_bias(bm, source_year, target_year):
    """Extend row `source_year` of the bias matrix to `target_year`.

    Fits a degree-1 least-squares line over the row's valid cells and
    evaluates it at the target year.  Fewer than 2 valid cells falls
    back to the row mean; an empty row yields a zero bias.  The method
    used is reported so callers can surface degraded rows.
    """
    if source_year not in bm.years:
        raise ContractError(f"county {bm.county}: year {source_year} not in bias matrix")
    si = bm.years.index(source_year)
    mask = bm.valid[si]
    xs = np.asarray(bm.years, dtype=np.float64)[mask]
    ys = bm.B[si][mask]
    if xs.size == 0:
        return BiasEstimate(0.0, "zero")
    if xs.size == 1:
        return BiasEstimate(float(ys[0]), "row_mean")
    # center the year axis before the polynomial fit for conditioning
    x0 = xs.mean()
    slope, intercept = np.polyfit(xs - x0, ys, 1)
    return BiasEstimate(float(intercept + slope * (target_year - x0)), "ols")


@dataclass
class RefinedSample:
    record: CountyYearRecord
    label: float
    bias_hat: float
    label_refined: float
    refined: bool
    method: str


@dataclass
class RefinedSampleSet:
    query: str
    target_year: int
    sigma: float
    entries: list = field(default_factory=list)

    @property
    def n_refined(self):
        return sum(1 for e in self.entries if e.refined)


def refine_labels(retrieved, biases, sigma, seed, target_year, copies=1, stats=None):
    """Shift retrieved labels to the target year.

    Each sample (county j, year s) gets y + b_hat + sigma * eps, where
    b_hat extrapolates county j's own bias row for year s.  Samples are
    processed in (county, year) order with a seeded generator, so the
    output is invariant to retrieval ordering.  Samples without a bias
    matrix pass through unrefined and are flagged.  Pass `stats` when
    the retrieved records carry normalized labels; refinement always
    works in physical units.
    """
    if sigma < 0:
        raise ContractError(f"sigma must be nonnegative, got {sigma}")
    if copies < 1:
        raise ContractError(f"copies must be at least 1, got {copies}")
    rng = np.random.default_rng(seed)
    out = RefinedSampleSet(query=retrieved.query, target_year=target_year, sigma=sigma)
    ordered = sorted(retrieved.samples, key=lambda r: (r.county, r.year))
    for rec in ordered:
        label = float(rec.yield_label)
        if stats is not None:
            label = stats.denormalize_label(label)
        bm = biases.get(rec.county)
        if bm is None or rec.year not in bm.years:
            est = None
        else:
            est = extrapolate_bias(bm, rec.year, target_year)
        for _ in range(copies):
            eps = float(rng.standard_normal()) if sigma > 0 else 0.0
            if est is None:
                out.entries.append(RefinedSample(rec, label, 0.0, label, False, "missing"))
            else:
                refined = label + est.value + sigma * eps
                out.entries.append(
                    RefinedSample(rec, label, est.value, refined, True, est.method)
                )
    return out


def save_bias_csv(biases, path):
    """Write all bias-matrix cells as county,source_year,target_year,bias,valid."""
    lines = ["county,source_year,target_year,bias,valid"]
    for county in sorted(biases):
        bm = biases[county]
        for si, s in enumerate(bm.years):
            for ki, k in enumerate(bm.years):
                lines.append(
                    f"{county},{s},{k},{bm.B[si, ki]!r},{int(bm.valid[si, ki])}"
                )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def save_refined_csv(sample_sets, path):
    """Write refined samples as query,source_county,source_year,label,bias_hat,label_refined."""
    lines = ["query,source_county,source_year,label,bias_hat,label_refined"]
    for ss in sample_sets:
        for e in ss.entries:
            lines.append(
                f"{ss.query},{e.record.county},{e.record.year},"
                f"{e.label!r},{e.bias_hat!r},{e.label_refined!r}"
            )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
