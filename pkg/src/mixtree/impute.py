"""Missing-value imputation strategies behind one interface.

Three mechanisms: the mixture's conditional expectation (responsibility
weighted across components), the global empirical column mean of the
training split, and an oracle k-nearest-neighbour baseline whose
neighbourhoods are computed on the complete pre-masking data. Observed
cells always pass through bit-identical.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from sklearn.base import BaseEstimator, TransformerMixin

from . import _engine
from .data import Dataset
from .errors import DimensionMismatch, IncompleteReference
from .gmm import MixtureModel, TrainConfig, fit
from .patterns import build_forest, extract_patterns

__all__ = [
    "ImputationResult",
    "impute_mixture",
    "impute_global_mean",
    "impute_knn",
    "MixtureImputer",
    "GlobalMeanImputer",
    "OracleKNNImputer",
]


@dataclass(frozen=True)
class ImputationResult:
    """Filled matrix plus per-cell provenance (True = cell was imputed)."""

    filled: NDArray[np.float64]
    provenance: NDArray[np.bool_]
    strategy: str
    params: dict = field(default_factory=dict)


def _as_dataset(data) -> Dataset:
    return data if isinstance(data, Dataset) else Dataset.from_array(data)


def impute_mixture(model: MixtureModel, data,
                   engine: str = "fast") -> ImputationResult:
    """Fill missing cells with the mixture's conditional expectation.

    Each sample's missing block receives the responsibility-weighted sum of
    the per-component conditional means, i.e. E[x_m | x_o] under the
    mixture, computed through the pattern-tree path.
    """
    dataset = _as_dataset(data)
    if dataset.d != model.d:
        raise DimensionMismatch(
            f"model has d={model.d}, dataset has d={dataset.d}")
    cfg = model.config or TrainConfig(n_components=model.n_components)
    patterns = extract_patterns(dataset)
    trees = build_forest(patterns, max_graph=cfg.max_graph,
                         recompute_every=cfg.recompute_every)
    layout = _engine.build_layout(patterns, trees, dataset.d)
    x = np.ascontiguousarray(dataset.values)
    buffers = _engine.EngineBuffers(layout, dataset.n, model.n_components)
    res = _engine.run_e_step(layout, x, model.means, model.covariances,
                             engine, buffers)
    p, _ = _engine.responsibilities_from_log_q(res.log_q, model.log_weights)
    precisions = model.precisions()
    filled = np.zeros((dataset.n, dataset.d))
    for j in range(model.n_components):
        xhat = _engine.component_fill(layout, x, model.means[j],
                                      model.covariances[j], precisions[j],
                                      engine, buffers)
        filled += p[:, j, None] * xhat
    observed = ~dataset.mask
    filled[observed] = dataset.values[observed]
    return ImputationResult(filled, dataset.mask.copy(), "mixture",
                            {"n_components": model.n_components,
                             "engine": engine})


def impute_global_mean(data, train_data=None) -> ImputationResult:
    """Fill each missing cell with its column's observed training mean.

    Columns with no observed training entries fall back to 0, the global
    mean of normalized data.
    """
    dataset = _as_dataset(data)
    train = dataset if train_data is None else _as_dataset(train_data)
    if train.d != dataset.d:
        raise DimensionMismatch("training split has a different width")
    obs = ~train.mask
    counts = obs.sum(axis=0)
    sums = train.filled(0.0).sum(axis=0)
    means = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    filled = np.where(dataset.mask, means, dataset.values)
    return ImputationResult(filled, dataset.mask.copy(), "global_mean", {})


def impute_knn(data, complete_reference, k: int = 1) -> ImputationResult:
    """Oracle nearest-neighbour fill.

    Neighbourhoods are Euclidean distances on ``complete_reference`` (the
    same rows without any missing values, the concession that bounds this
    baseline's best case). A missing cell (i, c) is filled from the nearest
    rows that have column c observed in the masked data: the single nearest
    value for k=1, the mean of the k nearest otherwise. Ties break on row
    index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    dataset = _as_dataset(data)
    ref = _as_dataset(complete_reference)
    if not ref.is_complete:
        raise IncompleteReference("reference dataset has missing cells")
    if ref.values.shape != dataset.values.shape:
        raise DimensionMismatch("reference must have the dataset's shape")

    r = ref.values
    sq = (r * r).sum(axis=1)
    observed = ~dataset.mask
    filled = dataset.filled(0.0)
    for i in range(dataset.n):
        cols = np.nonzero(dataset.mask[i])[0]
        if cols.size == 0:
            continue
        d2 = sq + sq[i] - 2.0 * (r @ r[i])
        d2[i] = np.inf  # self never donates (its cell is missing anyway)
        order = np.argsort(d2, kind="stable")
        for c in cols:
            donors = order[observed[order, c]][:k]
            if donors.size:
                filled[i, c] = dataset.values[donors, c].mean() if k > 1 \
                    else dataset.values[donors[0], c]
            else:
                filled[i, c] = 0.0
    out = np.where(dataset.mask, filled, dataset.values)
    return ImputationResult(out, dataset.mask.copy(), f"knn{k}", {"k": k})


class MixtureImputer(BaseEstimator, TransformerMixin):
    """Gaussian-mixture conditional-mean imputer (fit trains the mixture).

    Accepts (n, d) arrays with NaN as the missing marker, or
    :class:`Dataset` instances.
    """

    def __init__(self, n_components=5, max_iters=100, rel_ll_tolerance=1e-6,
                 ridge=1e-3, pc_fraction=1.0, seed=0, engine="fast",
                 recompute_every=16):
        self.n_components = n_components
        self.max_iters = max_iters
        self.rel_ll_tolerance = rel_ll_tolerance
        self.ridge = ridge
        self.pc_fraction = pc_fraction
        self.seed = seed
        self.engine = engine
        self.recompute_every = recompute_every

    def fit(self, X, y=None):
        config = TrainConfig(
            n_components=self.n_components,
            max_iters=self.max_iters,
            rel_ll_tolerance=self.rel_ll_tolerance,
            ridge=self.ridge,
            pc_fraction=self.pc_fraction,
            seed=self.seed,
            engine=self.engine,
            recompute_every=self.recompute_every,
        )
        self.model_, self.trace_ = fit(_as_dataset(X), config)
        return self

    def transform(self, X):
        return impute_mixture(self.model_, _as_dataset(X),
                              engine=self.engine).filled


class GlobalMeanImputer(BaseEstimator, TransformerMixin):
    """Column-mean imputer fitted on the training split's observed cells."""

    def fit(self, X, y=None):
        train = _as_dataset(X)
        obs = ~train.mask
        counts = obs.sum(axis=0)
        sums = train.filled(0.0).sum(axis=0)
        self.means_ = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
        return self

    def transform(self, X):
        dataset = _as_dataset(X)
        if dataset.d != self.means_.shape[0]:
            raise DimensionMismatch("width differs from the fitted split")
        return np.where(dataset.mask, self.means_, dataset.values)


class OracleKNNImputer(BaseEstimator, TransformerMixin):
    """Nearest-neighbour imputer with oracle access to the complete data."""

    def __init__(self, k=1):
        self.k = k

    def fit(self, X, y=None):
        self.reference_ = _as_dataset(X)
        if not self.reference_.is_complete:
            raise IncompleteReference("reference dataset has missing cells")
        return self

    def transform(self, X):
        return impute_knn(_as_dataset(X), self.reference_, k=self.k).filled
