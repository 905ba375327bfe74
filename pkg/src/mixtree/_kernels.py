"""Numba kernels for the per-pattern hot loop.

Everything here works on preallocated float64/int64 buffers and reports
failure through integer status codes instead of exceptions, so the whole
pattern-tree walk for one mixture component runs as a single jitted call.
Public wrappers in :mod:`mixtree.linalg` add validation and typed errors.

Status convention for the factorization primitives: ``-1`` means success,
a value ``>= 0`` is the index of the pivot that fell below the tolerance.
"""

import numpy as np
from numba import njit

LN_2PI = float(np.log(2.0 * np.pi))

# Relative pivot tolerance: a Cholesky pivot below REL_PIVOT_TOL times the
# largest diagonal entry of the source matrix counts as not positive definite.
REL_PIVOT_TOL = 1e-12


@njit(cache=True, nogil=True)
def chol_inplace(a, n, tol):
    """Lower Cholesky of ``a[:n, :n]`` in place. Upper triangle is ignored."""
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= a[j, k] * a[j, k]
        if s <= tol:
            return j
        ajj = np.sqrt(s)
        a[j, j] = ajj
        for i in range(j + 1, n):
            t = a[i, j]
            for k in range(j):
                t -= a[i, k] * a[j, k]
            a[i, j] = t / ajj
    return -1


@njit(cache=True, nogil=True)
def forward_solve_vec(L, n, b):
    """Solve ``L w = b`` in place for one right-hand side."""
    for i in range(n):
        t = b[i]
        for k in range(i):
            t -= L[i, k] * b[k]
        b[i] = t / L[i, i]


@njit(cache=True, nogil=True)
def forward_solve_rows(L, n, bt, m):
    """Solve ``L X = B`` in place where ``bt`` holds ``B^T`` (m rows)."""
    for r in range(m):
        for i in range(n):
            t = bt[r, i]
            for k in range(i):
                t -= L[i, k] * bt[r, k]
            bt[r, i] = t / L[i, i]


@njit(cache=True, nogil=True)
def chol_insert_one(L, cur, sigma, perm, v, tol, work):
    """Append variable ``v`` as the last row/column of the factor.

    ``L[:cur, :cur]`` factors ``sigma[perm[:cur]][:, perm[:cur]]`` on entry;
    on success the factor has dimension ``cur + 1`` and ``perm[cur] == v``.
    """
    for i in range(cur):
        work[i] = sigma[perm[i], v]
    forward_solve_vec(L, cur, work)
    s = sigma[v, v]
    for i in range(cur):
        s -= work[i] * work[i]
    if s <= tol:
        return cur
    for i in range(cur):
        L[cur, i] = work[i]
    L[cur, cur] = np.sqrt(s)
    perm[cur] = v
    return -1


@njit(cache=True, nogil=True)
def chol_delete_at(L, cur, pos):
    """Remove the factor row/column at position ``pos``.

    Deletes row ``pos`` of the factor (turning it lower trapezoidal with a
    one-element bulge per row) and restores triangularity with plane
    rotations acting on column pairs. The result has dimension ``cur - 1``.
    """
    m = cur - 1
    for i in range(pos, m):
        for j in range(cur):
            L[i, j] = L[i + 1, j]
    for k in range(pos, m):
        a = L[k, k]
        b = L[k, k + 1]
        if b != 0.0:
            r = np.hypot(a, b)
            c = a / r
            s = b / r
            for i in range(k, m):
                t1 = L[i, k]
                t2 = L[i, k + 1]
                L[i, k] = c * t1 + s * t2
                L[i, k + 1] = c * t2 - s * t1
        L[k, k + 1] = 0.0


@njit(cache=True, nogil=True)
def spd_inverse_from_chol(L, n, linv, out):
    """``out = (L L^T)^{-1}`` given the lower factor ``L``."""
    for i in range(n):
        for j in range(n):
            linv[i, j] = 1.0 if i == j else 0.0
    for j in range(n):
        for i in range(n):
            t = linv[i, j]
            for k in range(i):
                t -= L[i, k] * linv[k, j]
            linv[i, j] = t / L[i, i]
    for i in range(n):
        for j in range(i, n):
            t = 0.0
            for k in range(n):
                t += linv[k, i] * linv[k, j]
            out[i, j] = t
            out[j, i] = t


@njit(cache=True, nogil=True)
def ivl_extend_kernel(kx, nx, prec, x_ids, y_ids, ny, tol, out):
    """Grow a block inverse by ``ny`` variables via the inverse variance lemma.

    ``kx`` is the inverse of the X block; the Y-row blocks come from the
    full matrix ``prec``. ``out`` receives the (nx+ny) inverse with the X
    block first and the new variables trailing.
    """
    B = np.empty((ny, nx))
    for a in range(ny):
        for i in range(nx):
            t = 0.0
            for j in range(nx):
                t += prec[y_ids[a], x_ids[j]] * kx[j, i]
            B[a, i] = t
    S = np.empty((ny, ny))
    for a in range(ny):
        for b in range(ny):
            t = prec[y_ids[a], y_ids[b]]
            for j in range(nx):
                t -= B[a, j] * prec[y_ids[b], x_ids[j]]
            S[a, b] = t
    piv = chol_inplace(S, ny, tol)
    if piv >= 0:
        return piv
    linv = np.empty((ny, ny))
    sinv = np.empty((ny, ny))
    spd_inverse_from_chol(S, ny, linv, sinv)
    C2 = np.empty((ny, nx))
    for a in range(ny):
        for i in range(nx):
            t = 0.0
            for b in range(ny):
                t += sinv[a, b] * B[b, i]
            C2[a, i] = t
    for i in range(nx):
        for j in range(i, nx):
            t = kx[i, j]
            for a in range(ny):
                t += B[a, i] * C2[a, j]
            out[i, j] = t
            out[j, i] = t
    for a in range(ny):
        for i in range(nx):
            out[i, nx + a] = -C2[a, i]
            out[nx + a, i] = -C2[a, i]
        for b in range(ny):
            out[nx + a, nx + b] = sinv[a, b]
    return -1


@njit(cache=True, nogil=True)
def ivl_shrink_kernel(k_full, keep_pos, nkeep, drop_pos, ndrop, tol, out):
    """Schur-complement away the dropped block of a full inverse.

    ``out[:nkeep, :nkeep]`` receives the inverse of the retained sub-block
    of the original matrix.
    """
    kyy = np.empty((ndrop, ndrop))
    for a in range(ndrop):
        for b in range(ndrop):
            kyy[a, b] = k_full[drop_pos[a], drop_pos[b]]
    piv = chol_inplace(kyy, ndrop, tol)
    if piv >= 0:
        return piv
    V = np.empty((ndrop, nkeep))
    for a in range(ndrop):
        for i in range(nkeep):
            V[a, i] = k_full[drop_pos[a], keep_pos[i]]
    for i in range(nkeep):
        for a in range(ndrop):
            t = V[a, i]
            for k in range(a):
                t -= kyy[a, k] * V[k, i]
            V[a, i] = t / kyy[a, a]
    for i in range(nkeep):
        for j in range(i, nkeep):
            t = k_full[keep_pos[i], keep_pos[j]]
            for a in range(ndrop):
                t -= V[a, i] * V[a, j]
            out[i, j] = t
            out[j, i] = t
    return -1


@njit(cache=True, nogil=True)
def _scratch_factor(sigma, obs, no, tol, L, perm):
    """From-scratch lower factor of sigma[obs, obs]."""
    for i in range(no):
        for j in range(i + 1):
            L[i, j] = sigma[obs[i], obs[j]]
        perm[i] = obs[i]
    return chol_inplace(L, no, tol)


@njit(cache=True, nogil=True)
def _scratch_k(sigma, obs, no, mis, nm, L, K, bt):
    """Conditional covariance of the missing block via the factor."""
    if nm == 0:
        return
    for r in range(nm):
        for i in range(no):
            bt[r, i] = sigma[obs[i], mis[r]]
    forward_solve_rows(L, no, bt, nm)
    for i in range(nm):
        for j in range(i, nm):
            t = sigma[mis[i], mis[j]]
            for k in range(no):
                t -= bt[i, k] * bt[j, k]
            K[i, j] = t
            K[j, i] = t


@njit(cache=True, nogil=True)
def _chain_factor(sigma, pat, cur_n,
                  newobs_ptr, newobs_flat, newmis_ptr, newmis_flat,
                  tol_s, L, perm, work_vec):
    """Update the factor in place from the parent pattern's state.

    Deletes newly-missing variables, then appends newly-observed ones at
    the trailing position. Returns -1 on success.
    """
    nmis_new = newmis_ptr[pat + 1] - newmis_ptr[pat]
    cur = cur_n
    for a in range(nmis_new):
        v = newmis_flat[newmis_ptr[pat] + a]
        pos = -1
        for i in range(cur):
            if perm[i] == v:
                pos = i
                break
        chol_delete_at(L, cur, pos)
        for i in range(pos, cur - 1):
            perm[i] = perm[i + 1]
        cur -= 1

    nobs_new = newobs_ptr[pat + 1] - newobs_ptr[pat]
    for a in range(nobs_new):
        v = newobs_flat[newobs_ptr[pat] + a]
        piv = chol_insert_one(L, cur, sigma, perm, v, tol_s, work_vec)
        if piv >= 0:
            return piv
        cur += 1
    return -1


@njit(cache=True, nogil=True)
def _chain_k(prec, pat, par, mis_ptr, mis_flat,
             newobs_ptr, newobs_flat, newmis_ptr, newmis_flat,
             tol_s, tol_p, K_cur, ids_a, ids_b, K_tmp, K_tmp2):
    """Update the conditional covariance in place from the parent's state.

    Schur away newly observed variables, extend with newly missing ones
    (their row blocks come from the global precision), and restore sorted
    variable order. Returns -1 on success.
    """
    nm_par = mis_ptr[par + 1] - mis_ptr[par]
    nm = mis_ptr[pat + 1] - mis_ptr[pat]
    nobs_new = newobs_ptr[pat + 1] - newobs_ptr[pat]
    nmis_new = newmis_ptr[pat + 1] - newmis_ptr[pat]

    par_mis = mis_flat[mis_ptr[par]:mis_ptr[par + 1]]
    nkeep = 0
    ndrop = 0
    for i in range(nm_par):
        v = par_mis[i]
        dropped = False
        for a in range(nobs_new):
            if newobs_flat[newobs_ptr[pat] + a] == v:
                dropped = True
                break
        if dropped:
            ids_b[ndrop] = i
            ndrop += 1
        else:
            ids_a[nkeep] = i
            nkeep += 1
    if ndrop > 0:
        piv = ivl_shrink_kernel(K_cur, ids_a, nkeep, ids_b, ndrop, tol_s,
                                K_tmp)
        if piv >= 0:
            return piv
        src = K_tmp
    else:
        src = K_cur
    # ids_a currently holds kept positions; convert to kept variable ids.
    for i in range(nkeep):
        ids_a[i] = par_mis[ids_a[i]]

    if nmis_new > 0:
        new_ids = newmis_flat[newmis_ptr[pat]:newmis_ptr[pat + 1]]
        piv = ivl_extend_kernel(src, nkeep, prec, ids_a, new_ids,
                                nmis_new, tol_p, K_tmp2)
        if piv >= 0:
            return piv
        # Merge (sorted kept ids, sorted new ids) into sorted order.
        i = 0
        j = 0
        for t in range(nm):
            if i < nkeep and (j >= nmis_new or ids_a[i] < new_ids[j]):
                ids_b[t] = i
                i += 1
            else:
                ids_b[t] = nkeep + j
                j += 1
        for a in range(nm):
            for b in range(nm):
                K_cur[a, b] = K_tmp2[ids_b[a], ids_b[b]]
    elif ndrop > 0:
        for a in range(nm):
            for b in range(nm):
                K_cur[a, b] = src[a, b]
    return -1


@njit(cache=True, nogil=True)
def estep_walk(X, sigma, mu, tol_s,
               order, parent, scratch, branch_extra, use_chain,
               obs_ptr, obs_flat, mis_ptr, mis_flat,
               rows_ptr, rows_flat,
               newobs_ptr, newobs_flat, newmis_ptr, newmis_flat,
               cur_L, cur_perm, stack_L, stack_perm, stack_n, stack_uses,
               logq, counters):
    """Density pass for one component: chained factors + log densities.

    The observed-block factor is maintained in place along the depth-first
    visit order; at branch nodes a copy is parked on a small stack so later
    siblings can resume from the parent state (``branch_extra`` counts the
    pending siblings per node).

    Nodes with ``scratch`` set, or everything when ``use_chain`` is 0, are
    computed from scratch. Chained updates that lose positive definiteness
    fall back to from-scratch recomputation, counted in ``counters[0]``.
    Returns -1, or the id of the pattern whose from-scratch factorization
    failed (the covariance itself is not positive definite there).
    """
    p = order.shape[0]
    d = X.shape[1]
    work_vec = np.empty(d)
    delta = np.empty(d)

    sp = 0
    prev = -1
    cur_n = 0
    for t in range(p):
        pat = order[t]
        par = parent[pat]
        no = obs_ptr[pat + 1] - obs_ptr[pat]
        obs = obs_flat[obs_ptr[pat]:obs_ptr[pat + 1]]

        from_scratch = scratch[pat] == 1 or par < 0 or use_chain == 0
        if use_chain == 1:
            if par >= 0 and par != prev:
                # later sibling: resume from the parent state on the stack
                top = sp - 1
                if not from_scratch:
                    cur_n = stack_n[top]
                    for i in range(cur_n):
                        cur_perm[i] = stack_perm[top, i]
                        for j in range(i + 1):
                            cur_L[i, j] = stack_L[top, i, j]
                stack_uses[top] -= 1
                if stack_uses[top] == 0:
                    sp -= 1

        if not from_scratch:
            piv = _chain_factor(sigma, pat, cur_n,
                                newobs_ptr, newobs_flat,
                                newmis_ptr, newmis_flat,
                                tol_s, cur_L, cur_perm, work_vec)
            if piv >= 0:
                counters[0] += 1
                from_scratch = True
        if from_scratch:
            piv = _scratch_factor(sigma, obs, no, tol_s, cur_L, cur_perm)
            if piv >= 0:
                return pat
        cur_n = no

        if use_chain == 1 and branch_extra[pat] > 0:
            # park a copy of this state for the node's later children
            stack_n[sp] = cur_n
            stack_uses[sp] = branch_extra[pat]
            for i in range(cur_n):
                stack_perm[sp, i] = cur_perm[i]
                for j in range(i + 1):
                    stack_L[sp, i, j] = cur_L[i, j]
            sp += 1
        prev = pat

        # Observed-marginal log density for this pattern's samples.
        if no == 0:
            for r in range(rows_ptr[pat], rows_ptr[pat + 1]):
                logq[rows_flat[r]] = 0.0
        else:
            logdet = 0.0
            for i in range(no):
                logdet += np.log(cur_L[i, i])
            logdet *= 2.0
            base = -0.5 * (no * LN_2PI + logdet)
            for r in range(rows_ptr[pat], rows_ptr[pat + 1]):
                row = rows_flat[r]
                for i in range(no):
                    delta[i] = X[row, cur_perm[i]] - mu[cur_perm[i]]
                forward_solve_vec(cur_L, no, delta)
                q = 0.0
                for i in range(no):
                    q += delta[i] * delta[i]
                logq[row] = base - 0.5 * q
    return -1


@njit(cache=True, nogil=True)
def hamming_packed(words, out):
    """Pairwise popcount distances between bit rows packed into uint64."""
    p, w = words.shape
    m1 = np.uint64(0x5555555555555555)
    m2 = np.uint64(0x3333333333333333)
    m4 = np.uint64(0x0F0F0F0F0F0F0F0F)
    h01 = np.uint64(0x0101010101010101)
    one = np.uint64(1)
    two = np.uint64(2)
    four = np.uint64(4)
    s56 = np.uint64(56)
    for i in range(p):
        out[i, i] = 0
        for j in range(i + 1, p):
            s = 0
            for k in range(w):
                x = words[i, k] ^ words[j, k]
                x = x - ((x >> one) & m1)
                x = (x & m2) + ((x >> two) & m2)
                x = (x + (x >> four)) & m4
                s += np.int64((x * h01) >> s56)
            out[i, j] = s
            out[j, i] = s


@njit(cache=True, nogil=True)
def prim_dense(dist, root):
    """Prim's MST on a dense distance matrix, O(p^2).

    Ties resolve to the smallest node id (first minimum), and a node's
    parent is only replaced on strict improvement, so the tree is
    deterministic. Returns (parent, pick_order).
    """
    p = dist.shape[0]
    big = np.int64(np.iinfo(np.int64).max)
    best = np.empty(p, dtype=np.int64)
    parent = np.empty(p, dtype=np.int64)
    in_tree = np.zeros(p, dtype=np.uint8)
    pick_order = np.empty(p, dtype=np.int64)
    for i in range(p):
        best[i] = dist[root, i]
        parent[i] = root
    parent[root] = -1
    in_tree[root] = 1
    pick_order[0] = root
    for step in range(1, p):
        u = -1
        bu = big
        for i in range(p):
            if in_tree[i] == 0 and best[i] < bu:
                bu = best[i]
                u = i
        in_tree[u] = 1
        pick_order[step] = u
        du = dist[u]
        for i in range(p):
            if in_tree[i] == 0 and du[i] < best[i]:
                best[i] = du[i]
                parent[i] = u
    return parent, pick_order


@njit(cache=True, nogil=True)
def mstep_walk(X, pvec, sigma, prec, mu, tol_s, tol_p,
               order, parent, scratch, branch_extra, use_chain,
               obs_ptr, obs_flat, mis_ptr, mis_flat,
               rows_ptr, rows_flat,
               newobs_ptr, newobs_flat, newmis_ptr, newmis_flat,
               cur_L, cur_perm, cur_K, stack_K, stack_n, stack_uses,
               xhat, C, counters):
    """Imputation pass for one component: chained conditional covariances.

    Maintains the missing-block conditional covariance in place along the
    visit order (same branch-point stack discipline as :func:`estep_walk`).
    The observed-block factor is only built, from scratch, at recompute
    nodes where the reference Schur path needs it; chained nodes touch K
    alone. Per pattern: ``xhat`` rows get observed values verbatim and
    conditional means at the missing slots (via ``Sigma_mo Sigma_oo^{-1} =
    -K (Sigma^{-1})_mo``), and ``C`` accumulates ``(sum_i p_i) * K``
    scattered into the missing/missing block (caller divides by the total
    mass). Returns -1, or the id of a pattern that is not positive definite.
    """
    p = order.shape[0]
    d = X.shape[1]
    nm_max = cur_K.shape[0]
    ids_a = np.empty(d, dtype=np.int64)
    ids_b = np.empty(d, dtype=np.int64)
    K_tmp = np.empty((nm_max, nm_max))
    K_tmp2 = np.empty((nm_max, nm_max))
    bt = np.empty((nm_max, d))
    delta = np.empty(d)
    tvec = np.empty(d)

    sp = 0
    prev = -1
    for t in range(p):
        pat = order[t]
        par = parent[pat]
        no = obs_ptr[pat + 1] - obs_ptr[pat]
        nm = mis_ptr[pat + 1] - mis_ptr[pat]
        obs = obs_flat[obs_ptr[pat]:obs_ptr[pat + 1]]
        mis = mis_flat[mis_ptr[pat]:mis_ptr[pat + 1]]

        from_scratch = scratch[pat] == 1 or par < 0 or use_chain == 0
        if use_chain == 1:
            if par >= 0 and par != prev:
                top = sp - 1
                if not from_scratch:
                    nm_par = stack_n[top]
                    for i in range(nm_par):
                        for j in range(nm_par):
                            cur_K[i, j] = stack_K[top, i, j]
                stack_uses[top] -= 1
                if stack_uses[top] == 0:
                    sp -= 1

        if not from_scratch:
            piv = _chain_k(prec, pat, par, mis_ptr, mis_flat,
                           newobs_ptr, newobs_flat,
                           newmis_ptr, newmis_flat,
                           tol_s, tol_p, cur_K, ids_a, ids_b,
                           K_tmp, K_tmp2)
            if piv >= 0:
                counters[0] += 1
                from_scratch = True
        if from_scratch:
            piv = _scratch_factor(sigma, obs, no, tol_s, cur_L, cur_perm)
            if piv >= 0:
                return pat
            _scratch_k(sigma, obs, no, mis, nm, cur_L, cur_K, bt)

        if use_chain == 1 and branch_extra[pat] > 0:
            stack_n[sp] = nm
            stack_uses[sp] = branch_extra[pat]
            for i in range(nm):
                for j in range(nm):
                    stack_K[sp, i, j] = cur_K[i, j]
            sp += 1
        prev = pat

        # Conditional-mean fill and covariance correction for this pattern.
        w = 0.0
        for r in range(rows_ptr[pat], rows_ptr[pat + 1]):
            row = rows_flat[r]
            w += pvec[row]
            for i in range(no):
                xhat[row, obs[i]] = X[row, obs[i]]
            if nm > 0:
                for i in range(no):
                    delta[i] = X[row, obs[i]] - mu[obs[i]]
                for i in range(nm):
                    s = 0.0
                    for k in range(no):
                        s += prec[mis[i], obs[k]] * delta[k]
                    tvec[i] = s
                for i in range(nm):
                    s = mu[mis[i]]
                    for j in range(nm):
                        s -= cur_K[i, j] * tvec[j]
                    xhat[row, mis[i]] = s
        if nm > 0 and w != 0.0:
            for i in range(nm):
                for j in range(nm):
                    C[mis[i], mis[j]] += w * cur_K[i, j]
    return -1
