"""Full-covariance Gaussian mixture fit by expectation-maximization.

All density math is done in log space. Component densities are evaluated
through a Cholesky factor of each covariance, never an explicit determinant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (
    DataError,
    DegenerateData,
    DimensionMismatch,
    RepeatedCollapse,
    SingularCovariance,
    TooFewPoints,
)
from .kmeans import kmeans_plusplus

LOG_2PI = math.log(2 * math.pi)
MAX_RESEEDS = 2


@dataclass(frozen=True)
class FitReport:
    iterations: int
    final_log_likelihood: float
    per_iteration_log_likelihoods: tuple[float, ...]
    converged: bool
    seed: int
    init: str = "kmeans++"
    reg: float = 0.0
    reseeds: int = 0

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_log_likelihood": self.final_log_likelihood,
            "per_iteration_log_likelihoods": list(self.per_iteration_log_likelihoods),
            "converged": self.converged,
            "seed": self.seed,
            "init": self.init,
            "reg": self.reg,
            "reseeds": self.reseeds,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FitReport":
        obj = dict(obj)
        obj["per_iteration_log_likelihoods"] = tuple(obj["per_iteration_log_likelihoods"])
        return cls(**obj)


@dataclass(frozen=True, eq=False)
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    covariances: np.ndarray  # (K, d, d)
    fit_report: FitReport | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.asarray(self.covariances, dtype=float)
        if cov.ndim == 2 and mu.shape[1] == 1 and cov.shape[1] == 1:
            cov = cov.reshape(-1, 1, 1)
        if w.shape != (mu.shape[0],) or cov.shape != (mu.shape[0], mu.shape[1], mu.shape[1]):
            raise DataError(
                f"inconsistent shapes: weights {w.shape}, means {mu.shape}, covariances {cov.shape}"
            )
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @cached_property
    def _factors(self) -> tuple[np.ndarray, np.ndarray]:
        chol = np.empty_like(self.covariances)
        logdet = np.empty(self.k)
        for k, cov in enumerate(self.covariances):
            try:
                chol[k] = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise SingularCovariance(k) from None
            logdet[k] = 2.0 * np.sum(np.log(np.diag(chol[k])))
        return chol, logdet

    def to_json(self) -> dict:
        out = {
            "k": self.k,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "fit_report": None if self.fit_report is None else self.fit_report.to_json(),
        }
        out.update(self.meta)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "GmmModel":
        report = obj.get("fit_report")
        meta = {k: v for k, v in obj.items() if k not in ("k", "weights", "means", "covariances", "fit_report")}
        model = cls(
            np.asarray(obj["weights"], dtype=float),
            np.asarray(obj["means"], dtype=float),
            np.asarray(obj["covariances"], dtype=float),
            None if report is None else FitReport.from_json(report),
            meta,
        )
        if model.k != obj["k"]:
            raise DataError(f"k={obj['k']} disagrees with {model.k} stored components")
        return model


def save_model(model: GmmModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_json(), fh, indent=1)
        fh.write("\n")


def load_model(path) -> GmmModel:
    with open(path, encoding="utf-8") as fh:
        return GmmModel.from_json(json.load(fh))


# -- densities ---------------------------------------------------------------


def logsumexp(a: np.ndarray, axis: int = 1) -> np.ndarray:
    """Max-shifted log(sum(exp(a))) along ``axis``; rows of all -inf give -inf."""
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _as_matrix(X, dim: int) -> np.ndarray:
    X = getattr(X, "data", X)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if dim == 1 else X.reshape(1, -1)
    if X.shape[1] != dim:
        raise DimensionMismatch(dim, X.shape[1])
    return X


def component_log_densities(model: GmmModel, X) -> np.ndarray:
    """log N(x_i | mu_k, Sigma_k) for every row and component, shape (N, K)."""
    X = _as_matrix(X, model.dim)
    chol, logdet = model._factors
    out = np.empty((X.shape[0], model.k))
    for k in range(model.k):
        z = solve_triangular(chol[k], (X - model.means[k]).T, lower=True, check_finite=False)
        maha = np.einsum("dn,dn->n", z, z)
        out[:, k] = -0.5 * (model.dim * LOG_2PI + logdet[k] + maha)
    return out


def component_log_density(model: GmmModel, x, k: int) -> float:
    if not 0 <= k < model.k:
        raise IndexError(f"component {k} out of range for K={model.k}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (model.dim,):
        raise DimensionMismatch(model.dim, x.size)
    return float(component_log_densities(model, x.reshape(1, -1))[0, k])


def _log_weights(model: GmmModel) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(model.weights)


def mixture_log_densities(model: GmmModel, X) -> np.ndarray:
    return logsumexp(component_log_densities(model, X) + _log_weights(model), axis=1)


def mixture_density(model: GmmModel, x) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (model.dim,):
        raise DimensionMismatch(model.dim, x.size)
    return float(np.exp(mixture_log_densities(model, x.reshape(1, -1))[0]))


def log_responsibilities(model: GmmModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Return (log gamma (N, K), per-row log mixture density (N,))."""
    weighted = component_log_densities(model, X) + _log_weights(model)
    norm = logsumexp(weighted, axis=1)
    return weighted - norm[:, None], norm


def responsibilities(model: GmmModel, X) -> np.ndarray:
    return np.exp(log_responsibilities(model, X)[0])


# -- EM ----------------------------------------------------------------------


def data_covariance(X: np.ndarray) -> np.ndarray:
    return np.atleast_2d(np.cov(X, rowvar=False, bias=True))


def default_reg(X: np.ndarray) -> float:
    d = X.shape[1]
    trace = float(np.trace(data_covariance(X))) if X.shape[0] > 1 else 0.0
    return 1e-6 * trace / d if trace > 0 else 1e-6


def _initial_means(X: np.ndarray, k: int, init: str, rng: np.random.Generator) -> np.ndarray:
    if init == "random":
        return X[rng.choice(X.shape[0], size=k, replace=False)].copy()
    if init == "kmeans++":
        return kmeans_plusplus(X, k, rng)
    raise DataError(f"unknown init {init!r}; expected 'random' or 'kmeans++'")


def fit_em(
    X,
    k: int,
    *,
    init: str = "kmeans++",
    tol: float = 1e-6,
    max_iter: int = 200,
    reg: float | None = None,
    seed: int = 0,
) -> GmmModel:
    """Fit a K-component full-covariance mixture to the rows of ``X``.

    ``init`` is "kmeans++" (default) or "random" (means drawn uniformly from
    the data points, as in plain random initialisation). Every component
    starts from the data covariance and equal weight. ``reg=None`` picks a
    ridge of 1e-6 times the mean per-feature variance.

    The fit report's log-likelihood trajectory starts at the initial
    parameters. A component whose effective weight drops below one point is
    re-seeded at a random data point; that restarts the trajectory, and a
    component needing a third re-seed raises RepeatedCollapse.
    """
    X = np.asarray(getattr(X, "data", X), dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n, d = X.shape
    if k < 1 or n < k:
        raise TooFewPoints(n, k)
    if not np.all(np.isfinite(X)):
        raise DataError("X contains non-finite values")
    if k > 1 and np.all(X == X[0]):
        raise DegenerateData()
    init = init.lower().replace("_", "").replace("pp", "++")
    rng = np.random.default_rng(seed)
    if reg is None:
        reg = default_reg(X)
    ridge = reg * np.eye(d)
    base_cov = data_covariance(X) + ridge

    weights = np.full(k, 1.0 / k)
    means = _initial_means(X, k, init, rng)
    covs = np.repeat(base_cov[None], k, axis=0)
    model = GmmModel(weights, means, covs)
    log_resp, row_ll = log_responsibilities(model, X)
    trajectory = [float(row_ll.sum())]
    reseeds = np.zeros(k, dtype=int)
    converged = False
    iterations = 0

    while iterations < max_iter:
        iterations += 1
        resp = np.exp(log_resp)
        nk = resp.sum(axis=0)
        collapsed = np.flatnonzero(nk < 1.0)
        weights = nk / nk.sum()
        means = np.empty((k, d))
        covs = np.empty((k, d, d))
        for j in range(k):
            if j in collapsed:
                continue
            means[j] = resp[:, j] @ X / nk[j]
            diff = X - means[j]
            cov = (resp[:, j, None] * diff).T @ diff / nk[j] + ridge
            covs[j] = 0.5 * (cov + cov.T)
        if collapsed.size:
            for j in collapsed:
                reseeds[j] += 1
                if reseeds[j] > MAX_RESEEDS:
                    raise RepeatedCollapse(int(j), MAX_RESEEDS)
                means[j] = X[rng.integers(n)]
                covs[j] = base_cov
                weights[j] = 1.0 / k
            weights = weights / weights.sum()
        model = GmmModel(weights, means, covs)
        log_resp, row_ll = log_responsibilities(model, X)
        ll = float(row_ll.sum())
        if collapsed.size:
            trajectory = [ll]
            continue
        prev = trajectory[-1]
        trajectory.append(ll)
        if abs(ll - prev) < tol * (1.0 + abs(ll)):
            converged = True
            break

    report = FitReport(
        iterations=iterations,
        final_log_likelihood=trajectory[-1],
        per_iteration_log_likelihoods=tuple(trajectory),
        converged=converged,
        seed=seed,
        init=init,
        reg=float(reg),
        reseeds=int(reseeds.sum()),
    )
    return GmmModel(model.weights, model.means, model.covariances, report)


def log_likelihood(model: GmmModel, X) -> float:
    return float(mixture_log_densities(model, X).sum())


def n_parameters(k: int, d: int) -> int:
    return k - 1 + k * d + k * d * (d + 1) // 2


def bic(model: GmmModel, X) -> float:
    X = _as_matrix(X, model.dim)
    return -2.0 * log_likelihood(model, X) + n_parameters(model.k, model.dim) * math.log(X.shape[0])


def select_k_bic(X, k_range, **opts) -> tuple[int, dict[int, float], dict[int, GmmModel]]:
    """Fit every K in ``k_range`` and keep the one with the lowest BIC.

    Returns ``(best_k, {K: bic}, {K: model})``. A K whose fit raises is
    skipped; the last error is re-raised only when every K failed.
    """
    X = np.asarray(getattr(X, "data", X), dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    ks = list(k_range)
    if not ks:
        raise DataError("k_range is empty")
    scores: dict[int, float] = {}
    models: dict[int, GmmModel] = {}
    last_exc: Exception | None = None
    for k in ks:
        try:
            model = fit_em(X, k, **opts)
        except (DataError, RepeatedCollapse, SingularCovariance) as exc:
            last_exc = exc
            continue
        models[k] = model
        scores[k] = bic(model, X)
    if not scores:
        raise last_exc
    best = min(scores, key=lambda k: (scores[k], k))
    return best, scores, models
