"""EM training of full-covariance Gaussian mixtures with missing values.

Densities, conditional fills, and the covariance correction term are all
evaluated on the observed marginal of each sample: for a sample with
observed block o and missing block m, the per-component density is
N(x_o; mu_o, Sigma_oo), the conditional fill is
mu_m + Sigma_mo Sigma_oo^{-1} (x_o - mu_o), and the M-step covariance gains
the responsibility-weighted conditional covariance
Sigma_mm - Sigma_mo Sigma_oo^{-1} Sigma_om of every imputed block.

Two engines produce the per-pattern matrices: ``naive`` recomputes them
from scratch for every pattern, ``fast`` chains incremental updates along
a minimum spanning tree of the missing patterns. Both yield the same
parameter sequences up to rounding; the tree walk is just cheaper.
"""

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_solve, solve_triangular
from threadpoolctl import threadpool_limits

from . import _engine, linalg
from .data import Dataset
from .errors import DimensionMismatch, InvalidConfig
from .patterns import MissingPattern, build_forest, extract_patterns, schedule

__all__ = [
    "TrainConfig",
    "GaussianComponent",
    "MixtureModel",
    "Responsibilities",
    "PatternWorkspace",
    "EMTrace",
    "regularize",
    "kmeans_init",
    "workspace_from_scratch",
    "advance_workspace",
    "log_density_observed",
    "impute_for_component",
    "e_step",
    "m_step",
    "log_likelihood",
    "fit",
    "model_to_json",
    "model_from_json",
    "MissingGaussianMixture",
]

LN_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TrainConfig:
    """Training configuration snapshot.

    ``recompute_every`` bounds numerical error accumulation in the fast
    engine: tree nodes whose depth is a multiple of it are recomputed from
    scratch. ``None`` disables periodic recomputation (roots always are).
    """

    n_components: int = 1
    max_iters: int = 100
    rel_ll_tolerance: float = 1e-6
    ridge: float = 1e-6
    pc_fraction: float = 1.0
    seed: int = 0
    engine: str = "fast"
    recompute_every: int | None = 16
    kmeans_iters: int = 20
    optimize_weights: bool = True
    max_graph: int = 4096
    n_threads: int = 1

    def validate(self, n: int | None = None, d: int | None = None) -> None:
        if self.n_components < 1:
            raise InvalidConfig("n_components must be >= 1")
        if n is not None and self.n_components > n:
            raise InvalidConfig("need at least one sample per component")
        if self.max_iters < 1:
            raise InvalidConfig("max_iters must be >= 1")
        if self.rel_ll_tolerance < 0:
            raise InvalidConfig("rel_ll_tolerance must be >= 0")
        if self.ridge < 0:
            raise InvalidConfig("ridge must be >= 0")
        if not 0.0 < self.pc_fraction <= 1.0:
            raise InvalidConfig("pc_fraction must be in (0, 1]")
        if self.engine not in ("fast", "naive"):
            raise InvalidConfig(f"unknown engine {self.engine!r}")
        if self.recompute_every is not None and self.recompute_every < 1:
            raise InvalidConfig("recompute_every must be positive or None")
        if self.kmeans_iters < 1:
            raise InvalidConfig("kmeans_iters must be >= 1")
        if self.max_graph < 1:
            raise InvalidConfig("max_graph must be >= 1")
        if self.n_threads < 1:
            raise InvalidConfig("n_threads must be >= 1")

    def to_dict(self) -> dict:
        return {
            "n_components": self.n_components,
            "max_iters": self.max_iters,
            "rel_ll_tolerance": self.rel_ll_tolerance,
            "ridge": self.ridge,
            "pc_fraction": self.pc_fraction,
            "seed": self.seed,
            "engine": self.engine,
            "recompute_every": self.recompute_every,
            "kmeans_iters": self.kmeans_iters,
            "optimize_weights": self.optimize_weights,
            "max_graph": self.max_graph,
            "n_threads": self.n_threads,
        }


@dataclass(frozen=True)
class GaussianComponent:
    """One mixture component: mean, covariance, precision, log weight."""

    mean: NDArray[np.float64]
    cov: NDArray[np.float64]
    precision: NDArray[np.float64]
    log_weight: float


@dataclass(frozen=True)
class MixtureModel:
    """Fitted mixture parameters; immutable and safe to share."""

    means: NDArray[np.float64]         # (L, d)
    covariances: NDArray[np.float64]   # (L, d, d)
    log_weights: NDArray[np.float64]   # (L,)
    config: TrainConfig | None = None

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def weights(self) -> NDArray[np.float64]:
        return np.exp(self.log_weights)

    def component(self, j: int) -> GaussianComponent:
        return GaussianComponent(
            mean=self.means[j],
            cov=self.covariances[j],
            precision=_spd_inverse(self.covariances[j]),
            log_weight=float(self.log_weights[j]),
        )

    def precisions(self) -> NDArray[np.float64]:
        return np.stack([_spd_inverse(c) for c in self.covariances])


@dataclass(frozen=True)
class Responsibilities:
    """Posterior component probabilities p_ij plus the raw log densities."""

    p: NDArray[np.float64]       # (n, L), rows sum to 1
    log_q: NDArray[np.float64]   # (n, L), observed-marginal log densities


@dataclass(frozen=True)
class PatternWorkspace:
    """Cached per-(component, pattern) matrices.

    ``factor`` holds the Cholesky factor of the observed-observed covariance
    block (its perm lists global variable ids in factor order);
    ``cond_cov`` is the conditional covariance of the missing block given
    the observed block, indexed by ``missing_ids`` (sorted). ``fresh`` marks
    from-scratch computation as opposed to a chained update.
    """

    mask: NDArray[np.bool_]
    factor: linalg.CholFactor
    cond_cov: NDArray[np.float64]
    fresh: bool = True

    @property
    def missing_ids(self) -> NDArray[np.int64]:
        return np.nonzero(self.mask)[0].astype(np.int64)

    @property
    def observed_ids(self) -> NDArray[np.int64]:
        return np.nonzero(~self.mask)[0].astype(np.int64)


@dataclass
class EMTrace:
    """Per-iteration record of a training run (timings are wall-clock ms)."""

    log_likelihoods: list = field(default_factory=list)
    val_log_likelihoods: list = field(default_factory=list)
    estep_ms: list = field(default_factory=list)
    mstep_ms: list = field(default_factory=list)
    pattern_ms: float = 0.0
    mst_ms: float = 0.0
    init_ms: float = 0.0
    total_ms: float = 0.0
    n_patterns: int = 0
    fallback_recomputes: int = 0
    stop_reason: str = ""
    engine: str = ""

    @property
    def n_iterations(self) -> int:
        return len(self.log_likelihoods)


def _spd_inverse(cov):
    c = np.linalg.cholesky(cov)
    inv = cho_solve((c, True), np.eye(cov.shape[0]))
    return 0.5 * (inv + inv.T)


def regularize(cov, ridge: float, pc_fraction: float = 1.0):
    """Ridge plus principal-component truncation of a covariance matrix.

    With ``pc_fraction == 1`` this is exactly ``cov + ridge * I``. Otherwise
    the top ``ceil(pc_fraction * d)`` eigenpairs are kept, discarded
    eigenvalues are replaced by ``max(ridge, smallest kept * 1e-4)``, and
    ``ridge`` is added to every eigenvalue.
    """
    cov = np.asarray(cov, dtype=np.float64)
    d = cov.shape[0]
    if pc_fraction >= 1.0:
        return cov + ridge * np.eye(d)
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    k = math.ceil(pc_fraction * d)
    floor = max(ridge, w[d - k] * 1e-4)
    w[: d - k] = floor
    w += ridge
    out = (v * w) @ v.T
    return 0.5 * (out + out.T)


def _make_spd(cov, floor: float):
    """Clamp eigenvalues from below; used on pairwise-observed estimates.

    The floor is raised to 1e-3 of the largest eigenvalue: pairwise-observed
    covariance estimates can be wildly indefinite, and a scale-relative
    floor keeps the initial precision well conditioned (incremental updates
    chain through precision blocks, so conditioning bounds their error).
    """
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    w = np.maximum(w, max(floor, 1e-3 * float(w[-1])))
    out = (v * w) @ v.T
    return 0.5 * (out + out.T)


def kmeans_init(dataset: Dataset, config: TrainConfig) -> MixtureModel:
    """K-means on observed coordinates, then per-cluster moment estimates.

    Distances and centroid updates simply ignore missing coordinates.
    Cluster covariances come from pairwise-observed entries and are clamped
    to positive definite. Columns with no observations anywhere get mean 0,
    ridge variance (1 if ridge is 0), and zero covariances. Empty clusters
    are reseeded from a random sample, deterministically under the seed.
    """
    config.validate(n=dataset.n, d=dataset.d)
    rng = np.random.default_rng(config.seed)
    n, d = dataset.n, dataset.d
    L = config.n_components
    xz = dataset.filled(0.0)
    obs = ~dataset.mask
    obs_f = obs.astype(np.float64)

    col_counts = obs.sum(axis=0)
    col_means = np.zeros(d)
    seen = col_counts > 0
    col_means[seen] = xz[:, seen].sum(axis=0) / col_counts[seen]
    dead_cols = ~seen
    var_floor = config.ridge if config.ridge > 0 else 1.0

    start = rng.choice(n, size=L, replace=False)
    centroids = np.where(obs[start], xz[start], col_means)

    assign = np.full(n, -1)
    row_sq = (xz * xz).sum(axis=1)
    for _ in range(config.kmeans_iters):
        dist = (
            row_sq[:, None]
            - 2.0 * xz @ centroids.T
            + obs_f @ (centroids * centroids).T
        )
        new_assign = np.argmin(dist, axis=1)
        for j in range(L):
            if not (new_assign == j).any():
                pick = int(rng.integers(n))
                centroids[j] = np.where(obs[pick], xz[pick], col_means)
                new_assign[pick] = j
        if (new_assign == assign).all():
            break
        assign = new_assign
        for j in range(L):
            rows = assign == j
            counts = obs_f[rows].sum(axis=0)
            sums = xz[rows].sum(axis=0)
            upd = counts > 0
            centroids[j, upd] = sums[upd] / counts[upd]

    means = np.zeros((L, d))
    covs = np.zeros((L, d, d))
    for j in range(L):
        rows = assign == j
        means[j] = np.where(dead_cols, 0.0, centroids[j])
        xm = np.where(obs[rows], xz[rows] - means[j], 0.0)
        counts = obs_f[rows].T @ obs_f[rows]
        raw = xm.T @ xm
        with np.errstate(invalid="ignore"):
            cov = np.where(counts > 0, raw / np.maximum(counts, 1.0), 0.0)
        diag = np.diag(cov).copy()
        diag[np.diag(counts) == 0] = var_floor
        np.fill_diagonal(cov, diag)
        cov[dead_cols, :] = 0.0
        cov[:, dead_cols] = 0.0
        cov[dead_cols, dead_cols] = var_floor
        covs[j] = _make_spd(cov, max(config.ridge, 1e-6))

    if config.optimize_weights:
        weights = np.array([(assign == j).sum() / n for j in range(L)])
        weights = np.maximum(weights, 1e-12)
        weights /= weights.sum()
    else:
        weights = np.full(L, 1.0 / L)
    return MixtureModel(means, covs, np.log(weights), config)


def workspace_from_scratch(component: GaussianComponent,
                           pattern_mask) -> PatternWorkspace:
    """Reference-path workspace: direct factorization and Schur complement."""
    mask = np.asarray(pattern_mask, dtype=bool)
    obs = np.nonzero(~mask)[0]
    mis = np.nonzero(mask)[0]
    sub = component.cov[np.ix_(obs, obs)]
    factor = linalg.cholesky(sub)
    factor = linalg.CholFactor(factor.lower, obs.astype(np.int64))
    cond = linalg.conditional_covariance(component.cov, mis)
    return PatternWorkspace(mask=mask, factor=factor, cond_cov=cond, fresh=True)


def advance_workspace(parent_ws: PatternWorkspace, to_pattern,
                      component: GaussianComponent,
                      n_d: int | None = None) -> PatternWorkspace:
    """Derive a neighbouring pattern's workspace by incremental updates.

    For each variable newly observed: append it to the factor and Schur it
    out of the conditional covariance. For each variable newly missing:
    delete it from the factor and extend the conditional covariance with
    the matching precision blocks. Cost O(n_d n_o^2) + O(n_d n_m^2).
    """
    to_mask = to_pattern.mask if isinstance(to_pattern, MissingPattern) else (
        np.asarray(to_pattern, dtype=bool)
    )
    newly_observed = np.nonzero(parent_ws.mask & ~to_mask)[0]
    newly_missing = np.nonzero(~parent_ws.mask & to_mask)[0]
    if n_d is not None and newly_observed.size + newly_missing.size != n_d:
        raise DimensionMismatch("edge distance does not match the mask change")
    if newly_observed.size == 0 and newly_missing.size == 0:
        return parent_ws

    factor = parent_ws.factor
    for v in newly_missing:
        factor = linalg.chol_delete(factor, int(v))
    for v in newly_observed:
        factor = linalg.chol_insert(factor, component.cov, int(v))

    parent_mis = parent_ws.missing_ids
    cond = parent_ws.cond_cov
    kept = parent_mis
    if newly_observed.size:
        drop_pos = np.nonzero(np.isin(parent_mis, newly_observed))[0]
        keep_pos = np.nonzero(~np.isin(parent_mis, newly_observed))[0]
        cond = linalg.ivl_shrink(
            cond, linalg.BlockPartition(keep_pos, drop_pos)
        )
        kept = parent_mis[keep_pos]
    if newly_missing.size:
        prec = component.precision
        cond = linalg.ivl_extend(
            cond,
            prec[np.ix_(newly_missing, kept)],
            prec[np.ix_(newly_missing, newly_missing)],
        )
        current = np.concatenate([kept, newly_missing])
        order = np.argsort(current, kind="stable")
        cond = cond[np.ix_(order, order)]
    return PatternWorkspace(mask=to_mask, factor=factor, cond_cov=cond,
                            fresh=False)


def log_density_observed(component: GaussianComponent,
                         ws: PatternWorkspace, x_o) -> float:
    """log N(x_o; mu_o, Sigma_oo) through the workspace factor.

    ``x_o`` lists the observed values in ascending variable order. With no
    observed variables the marginal is the empty product and the log
    density is 0.
    """
    x_o = np.asarray(x_o, dtype=np.float64).ravel()
    n_o = ws.factor.dim
    if x_o.shape[0] != n_o:
        raise DimensionMismatch(f"expected {n_o} observed values")
    if n_o == 0:
        return 0.0
    mu_o = component.mean[np.sort(ws.factor.perm)]
    w = linalg.solve_lower(ws.factor, x_o - mu_o)
    return -0.5 * (n_o * LN_2PI + linalg.log_det(ws.factor) + float(w @ w))


def impute_for_component(component: GaussianComponent,
                         ws: PatternWorkspace, x) -> NDArray[np.float64]:
    """Conditional-mean fill of one sample under one component.

    Observed coordinates are copied unchanged; missing ones get
    mu_m + Sigma_mo Sigma_oo^{-1} (x_o - mu_o), evaluated as two triangular
    solves against the workspace factor.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != component.mean.shape[0]:
        raise DimensionMismatch("sample length does not match the model")
    mis = ws.missing_ids
    out = x.copy()
    if mis.size == 0:
        return out
    if ws.factor.dim == 0:
        out[mis] = component.mean[mis]
        return out
    perm = ws.factor.perm
    delta = x[perm] - component.mean[perm]
    t1 = np.ascontiguousarray(delta)
    from . import _kernels

    _kernels.forward_solve_vec(ws.factor.lower, ws.factor.dim, t1)
    t2 = solve_triangular(ws.factor.lower, t1, lower=True, trans="T")
    out[mis] = component.mean[mis] + component.cov[np.ix_(mis, perm)] @ t2
    return out


def _prepare(dataset: Dataset, config: TrainConfig):
    patterns = extract_patterns(dataset)
    trees = build_forest(patterns, max_graph=config.max_graph,
                         recompute_every=config.recompute_every)
    sched = schedule(trees, patterns)
    layout = _engine.build_layout(patterns, trees, dataset.d)
    x = np.ascontiguousarray(dataset.values)
    return patterns, trees, sched, layout, x


def e_step(model: MixtureModel, dataset: Dataset,
           engine: str = "fast", recompute_every: int | None = 16,
           n_threads: int = 1) -> Responsibilities:
    """Responsibilities p_ij with weighted densities, log-sum-exp normalized."""
    cfg = model.config or TrainConfig(n_components=model.n_components)
    cfg = replace(cfg, engine=engine, recompute_every=recompute_every)
    _, _, _, layout, x = _prepare(dataset, cfg)
    buffers = _engine.EngineBuffers(layout, dataset.n, model.n_components)
    res = _engine.run_e_step(layout, x, model.means, model.covariances,
                             engine, buffers, n_threads)
    p, _ = _engine.responsibilities_from_log_q(res.log_q, model.log_weights)
    return Responsibilities(p=p, log_q=res.log_q.T.copy())


def m_step(model: MixtureModel, dataset: Dataset, resp: Responsibilities,
           config: TrainConfig | None = None,
           engine: str = "fast") -> MixtureModel:
    """One maximization step given responsibilities; returns a new model."""
    cfg = config or model.config or TrainConfig(n_components=model.n_components)
    cfg = replace(cfg, engine=engine)
    _, _, _, layout, x = _prepare(dataset, cfg)
    buffers = _engine.EngineBuffers(layout, dataset.n, model.n_components)
    new_model, _ = _maximize(layout, x, model, model.precisions(), resp.p,
                             cfg, buffers=buffers)
    return new_model


def _blend_fill_row(model: MixtureModel, x_row, p_row):
    """Mixture conditional-mean fill of one sample (reference path)."""
    mask = np.isnan(x_row)
    acc = np.zeros_like(x_row)
    for j in range(model.n_components):
        comp = model.component(j)
        ws = workspace_from_scratch(comp, mask)
        acc += p_row[j] * impute_for_component(comp, ws, x_row)
    return acc


def _maximize(layout, x, model, precisions, p_resp, config,
              sample_log_density=None, buffers=None):
    n = x.shape[0]
    if buffers is None:
        buffers = _engine.EngineBuffers(layout, n, model.n_components)
    means, covs, masses = _engine.run_m_step(
        layout, x, model.means, model.covariances, precisions, p_resp,
        config.engine, buffers, config.n_threads,
    )
    degenerate = np.nonzero(masses < 1e-10 * n)[0]
    if degenerate.size:
        healthy = np.setdiff1d(np.arange(model.n_components), degenerate)
        if sample_log_density is None:
            sample_log_density = _engine.responsibilities_from_log_q(
                np.log(np.maximum(p_resp, 1e-300)).T, model.log_weights)[1]
        order = np.argsort(sample_log_density, kind="stable")
        for rank, j in enumerate(degenerate):
            # reseed from the sample the current model explains worst
            worst = int(order[rank % n])
            means[j] = _blend_fill_row(model, x[worst], p_resp[worst])
            base = covs[healthy].mean(axis=0) if healthy.size else np.eye(x.shape[1])
            covs[j] = base
            masses[j] = 1.0
    covs = np.stack([
        regularize(c, config.ridge, config.pc_fraction) for c in covs
    ])
    if config.optimize_weights:
        weights = masses / masses.sum()
    else:
        weights = np.full(model.n_components, 1.0 / model.n_components)
    new_model = MixtureModel(means, covs, np.log(weights), config)
    return new_model, degenerate


def log_likelihood(model: MixtureModel, dataset: Dataset) -> float:
    """Average per-sample log likelihood over observed coordinates."""
    cfg = model.config or TrainConfig(n_components=model.n_components)
    _, _, _, layout, x = _prepare(dataset, replace(cfg, engine="naive"))
    buffers = _engine.EngineBuffers(layout, dataset.n, model.n_components)
    res = _engine.run_e_step(layout, x, model.means, model.covariances,
                             "naive", buffers)
    _, lse = _engine.responsibilities_from_log_q(res.log_q, model.log_weights)
    return float(lse.mean())


def fit(dataset: Dataset, config: TrainConfig,
        validation: Dataset | None = None,
        callback=None) -> tuple[MixtureModel, EMTrace]:
    """Full training run: patterns, spanning trees, K-means init, EM loop.

    Stops at ``max_iters``, when the relative training log-likelihood
    improvement drops below ``rel_ll_tolerance``, or when the validation
    log likelihood decreases (the best-validation model is then returned).
    ``callback(iteration, model, log_likelihood)`` fires after every E-step.

    BLAS pools are limited to one thread for the duration of the run:
    worker parallelism is governed by ``n_threads`` (over components), and
    spinning BLAS threads would otherwise contend with the tree-walk
    kernels.
    """
    with threadpool_limits(limits=1):
        return _fit_inner(dataset, config, validation, callback)


def _fit_inner(dataset, config, validation, callback):
    config.validate(n=dataset.n, d=dataset.d)
    trace = EMTrace(engine=config.engine)
    t_total = time.perf_counter()

    t0 = time.perf_counter()
    patterns = extract_patterns(dataset)
    trace.pattern_ms = (time.perf_counter() - t0) * 1e3
    trace.n_patterns = len(patterns)

    t0 = time.perf_counter()
    trees = build_forest(patterns, max_graph=config.max_graph,
                         recompute_every=config.recompute_every)
    schedule(trees, patterns)  # validates the forest spans the patterns
    layout = _engine.build_layout(patterns, trees, dataset.d)
    trace.mst_ms = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    model = kmeans_init(dataset, config)
    trace.init_ms = (time.perf_counter() - t0) * 1e3

    x = np.ascontiguousarray(dataset.values)
    buffers = _engine.EngineBuffers(layout, dataset.n, config.n_components)
    val_state = None
    if validation is not None:
        val_patterns = extract_patterns(validation)
        val_trees = build_forest(val_patterns, max_graph=config.max_graph,
                                 recompute_every=config.recompute_every)
        val_layout = _engine.build_layout(val_patterns, val_trees, validation.d)
        val_x = np.ascontiguousarray(validation.values)
        val_buffers = _engine.EngineBuffers(val_layout, validation.n,
                                            config.n_components)
        val_state = (val_layout, val_x, val_buffers)
        best_val = -np.inf
        best_model = model

    ll_prev = None
    trace.stop_reason = "max_iters"
    for it in range(config.max_iters):
        t0 = time.perf_counter()
        res = _engine.run_e_step(layout, x, model.means, model.covariances,
                                 config.engine, buffers, config.n_threads)
        p_resp, lse = _engine.responsibilities_from_log_q(
            res.log_q, model.log_weights)
        ll = float(lse.mean())
        trace.estep_ms.append((time.perf_counter() - t0) * 1e3)
        trace.log_likelihoods.append(ll)
        trace.fallback_recomputes += res.fallback_recomputes
        if callback is not None:
            callback(it, model, ll)

        if val_state is not None:
            vres = _engine.run_e_step(val_state[0], val_state[1], model.means,
                                      model.covariances, "naive",
                                      val_state[2])
            _, vlse = _engine.responsibilities_from_log_q(
                vres.log_q, model.log_weights)
            vll = float(vlse.mean())
            trace.val_log_likelihoods.append(vll)
            if vll < best_val:
                model = best_model
                trace.stop_reason = "validation_increase"
                break
            best_val = vll
            best_model = model

        if ll_prev is not None and ll - ll_prev <= config.rel_ll_tolerance * abs(ll_prev):
            trace.stop_reason = "converged"
            break
        ll_prev = ll

        t0 = time.perf_counter()
        model, _ = _maximize(layout, x, model, model.precisions(), p_resp,
                             config, sample_log_density=lse, buffers=buffers)
        trace.mstep_ms.append((time.perf_counter() - t0) * 1e3)

    trace.total_ms = (time.perf_counter() - t_total) * 1e3
    return model, trace


def _format_float(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(float(x), ".17g")


def _dump_json(obj, pieces):
    if obj is None:
        pieces.append("null")
    elif obj is True:
        pieces.append("true")
    elif obj is False:
        pieces.append("false")
    elif isinstance(obj, str):
        import json as _json

        pieces.append(_json.dumps(obj))
    elif isinstance(obj, (int, np.integer)):
        pieces.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        pieces.append(_format_float(float(obj)))
    elif isinstance(obj, dict):
        pieces.append("{")
        for k, (key, val) in enumerate(obj.items()):
            if k:
                pieces.append(", ")
            _dump_json(str(key), pieces)
            pieces.append(": ")
            _dump_json(val, pieces)
        pieces.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        pieces.append("[")
        for k, val in enumerate(obj):
            if k:
                pieces.append(", ")
            _dump_json(val, pieces)
        pieces.append("]")
    else:
        raise TypeError(f"cannot serialize {type(obj)!r}")


def model_to_json(model: MixtureModel, trace: EMTrace | None = None) -> str:
    """Self-describing JSON document with 17-significant-digit floats.

    Covariances are stored as row-major lower triangles. The trace carries
    the log-likelihood history only; wall-clock timings live in run reports
    so that identical fits serialize byte-identically.
    """
    L, d = model.n_components, model.d
    tril = [
        [model.covariances[j][r, c] for r in range(d) for c in range(r + 1)]
        for j in range(L)
    ]
    doc = {
        "d": d,
        "L": L,
        "weights": list(model.weights),
        "means": [list(m) for m in model.means],
        "covariances": tril,
        "config": model.config.to_dict() if model.config else None,
        "trace": None if trace is None else {
            "log_likelihoods": list(trace.log_likelihoods),
            "val_log_likelihoods": list(trace.val_log_likelihoods),
            "n_iterations": trace.n_iterations,
            "stop_reason": trace.stop_reason,
            "engine": trace.engine,
            "n_patterns": trace.n_patterns,
            "fallback_recomputes": trace.fallback_recomputes,
        },
    }
    pieces = []
    _dump_json(doc, pieces)
    return "".join(pieces)


def model_from_json(text: str) -> MixtureModel:
    import json as _json

    doc = _json.loads(text)
    L, d = doc["L"], doc["d"]
    means = np.asarray(doc["means"], dtype=np.float64)
    covs = np.zeros((L, d, d))
    for j in range(L):
        flat = doc["covariances"][j]
        k = 0
        for r in range(d):
            for c in range(r + 1):
                covs[j, r, c] = flat[k]
                covs[j, c, r] = flat[k]
                k += 1
    weights = np.asarray(doc["weights"], dtype=np.float64)
    config = TrainConfig(**doc["config"]) if doc.get("config") else None
    return MixtureModel(means, covs, np.log(weights), config)


class MissingGaussianMixture:
    """Estimator facade over :func:`fit` with the scikit-learn protocol.

    Accepts an (n, d) array with NaN marking missing cells (or a
    :class:`Dataset`). ``score`` is the average observed-marginal log
    likelihood; ``predict_proba`` returns responsibilities.
    """

    def __init__(self, n_components=1, max_iters=100, rel_ll_tolerance=1e-6,
                 ridge=1e-6, pc_fraction=1.0, seed=0, engine="fast",
                 recompute_every=16, kmeans_iters=20, optimize_weights=True,
                 max_graph=4096, n_threads=1):
        self.n_components = n_components
        self.max_iters = max_iters
        self.rel_ll_tolerance = rel_ll_tolerance
        self.ridge = ridge
        self.pc_fraction = pc_fraction
        self.seed = seed
        self.engine = engine
        self.recompute_every = recompute_every
        self.kmeans_iters = kmeans_iters
        self.optimize_weights = optimize_weights
        self.max_graph = max_graph
        self.n_threads = n_threads

    def _config(self) -> TrainConfig:
        return TrainConfig(
            n_components=self.n_components,
            max_iters=self.max_iters,
            rel_ll_tolerance=self.rel_ll_tolerance,
            ridge=self.ridge,
            pc_fraction=self.pc_fraction,
            seed=self.seed,
            engine=self.engine,
            recompute_every=self.recompute_every,
            kmeans_iters=self.kmeans_iters,
            optimize_weights=self.optimize_weights,
            max_graph=self.max_graph,
            n_threads=self.n_threads,
        )

    @staticmethod
    def _as_dataset(X) -> Dataset:
        return X if isinstance(X, Dataset) else Dataset.from_array(X)

    def get_params(self, deep=True):
        return self._config().to_dict()

    def set_params(self, **params):
        for key, val in params.items():
            if not hasattr(self, key):
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, val)
        return self

    def fit(self, X, y=None, validation=None):
        ds = self._as_dataset(X)
        self.model_, self.trace_ = fit(
            ds, self._config(),
            validation=None if validation is None else self._as_dataset(validation),
        )
        return self

    def predict_proba(self, X):
        return e_step(self.model_, self._as_dataset(X),
                      engine=self.engine,
                      recompute_every=self.recompute_every,
                      n_threads=self.n_threads).p

    def score(self, X, y=None):
        return log_likelihood(self.model_, self._as_dataset(X))

    def to_json(self) -> str:
        return model_to_json(self.model_, self.trace_)
