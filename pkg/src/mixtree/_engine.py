"""EM engine internals: packed pattern layout and per-iteration passes.

The engine walks the pattern forest once per component per iteration. The
"fast" variant derives each pattern's observed-block Cholesky factor and
missing-block conditional covariance from its tree parent by incremental
updates, recomputing from scratch at tree roots, at depths that are a
multiple of the recompute interval, and whenever an update loses positive
definiteness. The "naive" variant recomputes every node from scratch. Both
run the same kernels in the same order, so their results agree to rounding.

All large working arrays live in :class:`EngineBuffers` and are reused
across iterations; per-iteration allocation churn is what dominates the
wall clock otherwise.
"""

import concurrent.futures
import threading
from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._kernels import REL_PIVOT_TOL
from .errors import NumericalError

__all__ = [
    "PatternLayout",
    "EngineBuffers",
    "build_layout",
    "EstepResult",
    "run_e_step",
    "run_m_step",
    "responsibilities_from_log_q",
    "impute_rows",
]


def _ragged(rows):
    ptr = np.zeros(len(rows) + 1, dtype=np.int64)
    for i, r in enumerate(rows):
        ptr[i + 1] = ptr[i] + len(r)
    flat = (np.concatenate(rows) if ptr[-1] else np.empty(0)).astype(np.int64)
    return ptr, flat


@dataclass
class PatternLayout:
    """Packed per-pattern index arrays consumed by the numba kernels.

    ``branch_extra[pid]`` is the number of later siblings that will resume
    from pid's factor state (children minus one); ``stack_depth`` is the
    worst-case number of factor states parked at once during the walk.
    """

    d: int
    p: int
    nm_max: int
    order: np.ndarray
    parent: np.ndarray
    scratch_fast: np.ndarray
    scratch_naive: np.ndarray
    branch_extra: np.ndarray
    stack_depth: int
    obs_ptr: np.ndarray
    obs_flat: np.ndarray
    mis_ptr: np.ndarray
    mis_flat: np.ndarray
    rows_ptr: np.ndarray
    rows_flat: np.ndarray
    newobs_ptr: np.ndarray
    newobs_flat: np.ndarray
    newmis_ptr: np.ndarray
    newmis_flat: np.ndarray

    def scratch(self, engine: str) -> np.ndarray:
        return self.scratch_fast if engine == "fast" else self.scratch_naive

    def pattern_of_rows(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.int64)
        for pid in range(self.p):
            out[self.rows_flat[self.rows_ptr[pid]:self.rows_ptr[pid + 1]]] = pid
        return out


def build_layout(patterns, trees, d: int) -> PatternLayout:
    p = len(patterns)
    obs = [pat.observed_indices for pat in patterns]
    mis = [pat.missing_indices for pat in patterns]
    rows = [pat.sample_ids for pat in patterns]
    order = []
    parent = np.full(p, -1, dtype=np.int64)
    scratch_fast = np.zeros(p, dtype=np.uint8)
    newobs = [np.empty(0, dtype=np.int64)] * p
    newmis = [np.empty(0, dtype=np.int64)] * p
    masks = [pat.mask for pat in patterns]
    for tree in trees:
        for pid in tree.visit_order:
            order.append(pid)
            par = tree.parent[pid][0]
            if tree.needs_scratch(pid) or par < 0:
                scratch_fast[pid] = 1
            parent[pid] = par
            if par >= 0:
                newobs[pid] = np.nonzero(masks[par] & ~masks[pid])[0].astype(np.int64)
                newmis[pid] = np.nonzero(~masks[par] & masks[pid])[0].astype(np.int64)
    obs_ptr, obs_flat = _ragged(obs)
    mis_ptr, mis_flat = _ragged(mis)
    rows_ptr, rows_flat = _ragged(rows)
    newobs_ptr, newobs_flat = _ragged(newobs)
    newmis_ptr, newmis_flat = _ragged(newmis)
    nm_max = max((pat.n_m for pat in patterns), default=0)

    children = np.zeros(p, dtype=np.int64)
    for pid in range(p):
        if parent[pid] >= 0:
            children[parent[pid]] += 1
    branch_extra = np.maximum(children - 1, 0)
    # mirror the kernel's stack discipline to size the state pool
    stack: list[int] = []
    depth = 0
    prev = -1
    for pid in order:
        par = parent[pid]
        if par >= 0 and par != prev:
            stack[-1] -= 1
            if stack[-1] == 0:
                stack.pop()
        if branch_extra[pid] > 0:
            stack.append(int(branch_extra[pid]))
            depth = max(depth, len(stack))
        prev = pid

    return PatternLayout(
        d=d,
        p=p,
        nm_max=max(nm_max, 1),
        order=np.asarray(order, dtype=np.int64),
        parent=parent,
        scratch_fast=scratch_fast,
        scratch_naive=np.ones(p, dtype=np.uint8),
        branch_extra=branch_extra,
        stack_depth=max(depth, 1),
        obs_ptr=obs_ptr,
        obs_flat=obs_flat,
        mis_ptr=mis_ptr,
        mis_flat=mis_flat,
        rows_ptr=rows_ptr,
        rows_flat=rows_flat,
        newobs_ptr=newobs_ptr,
        newobs_flat=newobs_flat,
        newmis_ptr=newmis_ptr,
        newmis_flat=newmis_flat,
    )


class EngineBuffers:
    """Working storage reused across EM iterations.

    The walk state (current factor, current conditional covariance, and the
    branch-point stack) is per worker thread; log densities are per
    component. Nothing here affects results, only allocation traffic.
    """

    def __init__(self, layout: PatternLayout, n: int, n_comp: int):
        d, nm = layout.d, layout.nm_max
        self.log_q = np.empty((n_comp, n))
        self.counters = np.zeros((n_comp, 2), dtype=np.int64)
        self.xhat = np.empty((n, d))
        self.wx = np.empty((n, d))
        self.c_acc = np.empty((d, d))
        self._d = d
        self._nm = nm
        self._smax = layout.stack_depth
        self._local = threading.local()

    def walk_state(self):
        if not hasattr(self._local, "cur_L"):
            d, nm, smax = self._d, self._nm, self._smax
            self._local.cur_L = np.zeros((d, d))
            self._local.cur_perm = np.zeros(d, dtype=np.int64)
            self._local.cur_K = np.zeros((nm, nm))
            self._local.stack_L = np.zeros((smax, d, d))
            self._local.stack_perm = np.zeros((smax, d), dtype=np.int64)
            self._local.stack_K = np.zeros((smax, nm, nm))
            self._local.stack_n = np.zeros(smax, dtype=np.int64)
            self._local.stack_uses = np.zeros(smax, dtype=np.int64)
        loc = self._local
        return (loc.cur_L, loc.cur_perm, loc.cur_K, loc.stack_L,
                loc.stack_perm, loc.stack_K, loc.stack_n, loc.stack_uses)


@dataclass
class EstepResult:
    """Per-component observed-marginal log densities."""

    log_q: np.ndarray          # (L, n)
    fallback_recomputes: int


def _tolerances(sigma, prec):
    tol_s = REL_PIVOT_TOL * max(float(np.max(np.diag(sigma))), 0.0)
    tol_p = REL_PIVOT_TOL * max(float(np.max(np.diag(prec))), 0.0)
    return tol_s, tol_p


def run_e_step(layout: PatternLayout, x, means, covariances,
               engine: str, buffers: EngineBuffers,
               n_threads: int = 1) -> EstepResult:
    """Density pass: chained observed-block factors for every component."""
    n_comp = means.shape[0]
    scratch = layout.scratch(engine)
    buffers.counters[:] = 0
    use_chain = 1 if engine == "fast" else 0

    def one(j):
        cur_L, cur_perm, _, st_L, st_perm, _, st_n, st_uses = \
            buffers.walk_state()
        sigma = np.ascontiguousarray(covariances[j])
        mu = np.ascontiguousarray(means[j])
        tol_s = REL_PIVOT_TOL * max(float(np.max(np.diag(sigma))), 0.0)
        status = _kernels.estep_walk(
            x, sigma, mu, tol_s,
            layout.order, layout.parent, scratch, layout.branch_extra,
            use_chain,
            layout.obs_ptr, layout.obs_flat, layout.mis_ptr, layout.mis_flat,
            layout.rows_ptr, layout.rows_flat,
            layout.newobs_ptr, layout.newobs_flat,
            layout.newmis_ptr, layout.newmis_flat,
            cur_L, cur_perm, st_L, st_perm, st_n, st_uses,
            buffers.log_q[j], buffers.counters[j],
        )
        if status >= 0:
            raise NumericalError(
                f"covariance of component {j} is not positive definite on "
                f"the observed block of pattern {status}"
            )

    if n_threads > 1 and n_comp > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=n_threads) as ex:
            list(ex.map(one, range(n_comp)))
    else:
        for j in range(n_comp):
            one(j)
    return EstepResult(buffers.log_q[:n_comp],
                       int(buffers.counters[:, 0].sum()))


def responsibilities_from_log_q(log_q, log_weights):
    """Log-sum-exp normalization of weighted densities per sample.

    ``log_q`` is (L, n); returns p with shape (n, L) and the per-sample
    total log density (the log-likelihood contributions).
    """
    logp = log_q.T + log_weights[None, :]
    mx = logp.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logp - mx).sum(axis=1))
    p = np.exp(logp - lse[:, None])
    return p, lse


def component_fill(layout: PatternLayout, x, mean, cov, precision,
                   engine: str, buffers: EngineBuffers, pvec=None,
                   c_out=None) -> np.ndarray:
    """One component's conditional-mean fill of every sample (in buffers).

    Runs the full chained walk (factor + conditional covariance) and writes
    the per-sample fill into ``buffers.xhat``; when ``pvec``/``c_out`` are
    given, also accumulates the responsibility-weighted conditional
    covariances into ``c_out``.
    """
    n = x.shape[0]
    if pvec is None:
        pvec = np.zeros(n)
    if c_out is None:
        c_out = buffers.c_acc
        c_out[:] = 0.0
    scratch = layout.scratch(engine)
    use_chain = 1 if engine == "fast" else 0
    (cur_L, cur_perm, cur_K, st_L, st_perm, st_K, st_n, st_uses) = \
        buffers.walk_state()
    sigma = np.ascontiguousarray(cov)
    prec = np.ascontiguousarray(precision)
    tol_s, tol_p = _tolerances(sigma, prec)
    status = _kernels.mstep_walk(
        x, np.ascontiguousarray(pvec), sigma, prec,
        np.ascontiguousarray(mean), tol_s, tol_p,
        layout.order, layout.parent, scratch, layout.branch_extra, use_chain,
        layout.obs_ptr, layout.obs_flat, layout.mis_ptr, layout.mis_flat,
        layout.rows_ptr, layout.rows_flat,
        layout.newobs_ptr, layout.newobs_flat,
        layout.newmis_ptr, layout.newmis_flat,
        cur_L, cur_perm, cur_K, st_K, st_n, st_uses,
        buffers.xhat, c_out, buffers.counters[0, 1:],
    )
    if status >= 0:
        raise NumericalError(
            f"covariance is not positive definite on the observed block of "
            f"pattern {status}"
        )
    return buffers.xhat


def run_m_step(layout: PatternLayout, x, means, covariances, precisions,
               p_resp, engine: str, buffers: EngineBuffers,
               n_threads: int = 1):
    """Per-component M-step statistics via a second chained walk.

    Returns raw (pre-regularization) means and covariances plus the
    responsibility mass of each component. Components are independent, so
    they may be processed by concurrent workers without changing results.
    """
    n, d = x.shape
    n_comp = means.shape[0]
    new_means = np.empty((n_comp, d))
    new_covs = np.empty((n_comp, d, d))
    masses = np.empty(n_comp)

    def one(j, local_buffers):
        pvec = np.ascontiguousarray(p_resp[:, j])
        c_acc = local_buffers.c_acc
        c_acc[:] = 0.0
        xhat = component_fill(layout, x, means[j], covariances[j],
                              precisions[j], engine, local_buffers,
                              pvec=pvec, c_out=c_acc)
        w = float(pvec.sum())
        masses[j] = w
        if w <= 0.0:
            new_means[j] = means[j]
            new_covs[j] = np.eye(d)
            return
        mu = pvec @ xhat / w
        wx = local_buffers.wx
        np.multiply(xhat, pvec[:, None], out=wx)
        a = wx.T @ xhat
        s = a / w - np.outer(mu, mu)
        cov = s + c_acc / w
        new_means[j] = mu
        new_covs[j] = 0.5 * (cov + cov.T)

    if n_threads > 1 and n_comp > 1:
        layout_ref = layout

        def worker(j):
            one(j, EngineBuffers(layout_ref, n, 1))

        with concurrent.futures.ThreadPoolExecutor(max_workers=n_threads) as ex:
            list(ex.map(worker, range(n_comp)))
    else:
        for j in range(n_comp):
            one(j, buffers)
    return new_means, new_covs, masses
