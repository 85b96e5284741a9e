"""Hot inner loops, each with a numba kernel and a numpy fallback.

The public functions dispatch on :data:`cmbrec._accel.BACKEND`.  The
``*_nb`` / ``*_np`` pairs are importable directly so tests and the benchmark
can compare the two paths on identical inputs.
"""
import numpy as np

from ._accel import njit, use_numba

# ---------------------------------------------------------------------------
# top-k selection (descending score, ties -> lower column index)
# ---------------------------------------------------------------------------


@njit(cache=True)
def topk_rows_nb(scores, k):
    n, m = scores.shape
    out = np.empty((n, k), dtype=np.int64)
    vals = np.empty(k, dtype=np.float64)
    for r in range(n):
        filled = 0
        for j in range(m):
            s = scores[r, j]
            if filled == k and not s > vals[k - 1]:
                continue
            # equal scores keep the earlier (lower) index ahead
            pos = filled if filled < k else k - 1
            while pos > 0 and s > vals[pos - 1]:
                if pos < k:
                    vals[pos] = vals[pos - 1]
                    out[r, pos] = out[r, pos - 1]
                pos -= 1
            vals[pos] = s
            out[r, pos] = j
            if filled < k:
                filled += 1
    return out


def topk_rows_np(scores, k):
    n = scores.shape[0]
    neg = -scores
    kth = np.partition(neg, k - 1, axis=1)[:, k - 1 : k]
    above = neg < kth
    need = k - above.sum(axis=1)
    eq = neg == kth
    sel = above | (eq & (np.cumsum(eq, axis=1) <= need[:, None]))
    rows, cols = np.nonzero(sel)
    vals = scores[rows, cols].reshape(n, k)
    cols = cols.reshape(n, k)
    order = np.argsort(-vals, axis=1, kind="stable")
    return np.take_along_axis(cols, order, axis=1).astype(np.int64)


def topk_rows(scores, k):
    """Indices of the ``k`` largest entries of every row of ``scores``."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if use_numba():
        return topk_rows_nb(scores, k)
    return topk_rows_np(scores, k)


# ---------------------------------------------------------------------------
# scatter-add of gradient columns
# ---------------------------------------------------------------------------


@njit(cache=True)
def scatter_add_cols_nb(target, idx, vals):
    d = target.shape[0]
    for b in range(idx.shape[0]):
        c = idx[b]
        for r in range(d):
            target[r, c] += vals[r, b]


def scatter_add_cols_np(target, idx, vals):
    np.add.at(target.T, idx, vals.T)


def scatter_add_cols(target, idx, vals):
    """``target[:, idx[b]] += vals[:, b]`` with repeated indices accumulated."""
    if use_numba():
        scatter_add_cols_nb(target, idx, np.ascontiguousarray(vals))
    else:
        scatter_add_cols_np(target, idx, vals)


# ---------------------------------------------------------------------------
# CSR membership (negative sampling rejection test)
# ---------------------------------------------------------------------------


@njit(cache=True)
def csr_contains_nb(indptr, indices, rows, cols):
    out = np.zeros(rows.shape[0], dtype=np.bool_)
    for t in range(rows.shape[0]):
        lo = indptr[rows[t]]
        hi = indptr[rows[t] + 1]
        c = cols[t]
        while lo < hi:
            mid = (lo + hi) // 2
            if indices[mid] < c:
                lo = mid + 1
            else:
                hi = mid
        out[t] = lo < indptr[rows[t] + 1] and indices[lo] == c
    return out


def csr_contains_np(indptr, indices, rows, cols, n_cols):
    owner = np.repeat(np.arange(len(indptr) - 1, dtype=np.int64), np.diff(indptr))
    keys = owner * n_cols + indices
    probe = rows.astype(np.int64) * n_cols + cols
    pos = np.searchsorted(keys, probe)
    pos = np.minimum(pos, max(len(keys) - 1, 0))
    if len(keys) == 0:
        return np.zeros(len(rows), dtype=bool)
    return keys[pos] == probe


def csr_contains(indptr, indices, rows, cols, n_cols):
    """Whether ``cols[t]`` is stored in row ``rows[t]`` of a CSR pattern
    whose per-row ``indices`` are sorted ascending."""
    if use_numba():
        return csr_contains_nb(indptr, indices, rows, cols)
    return csr_contains_np(indptr, indices, rows, cols, n_cols)


# ---------------------------------------------------------------------------
# alpha-DCG of many lists
# ---------------------------------------------------------------------------


@njit(cache=True)
def alpha_dcg_rows_nb(lists, item_topics, alpha):
    n, k = lists.shape
    m = item_topics.shape[1]
    out = np.zeros(n, dtype=np.float64)
    cov = np.zeros(m, dtype=np.int64)
    for r in range(n):
        cov[:] = 0
        total = 0.0
        for pos in range(k):
            v = lists[r, pos]
            gain = 0.0
            for s in range(m):
                if item_topics[v, s]:
                    gain += (1.0 - alpha) ** cov[s]
                    cov[s] += 1
            total += gain / np.log2(pos + 2.0)
        out[r] = total
    return out


def alpha_dcg_rows_np(lists, item_topics, alpha):
    g = item_topics[lists].astype(np.float64)
    cov = np.cumsum(g, axis=1) - g
    gain = (g * (1.0 - alpha) ** cov).sum(axis=2)
    disc = np.log2(np.arange(2, lists.shape[1] + 2, dtype=np.float64))
    return (gain / disc).sum(axis=1)


def alpha_dcg_rows(lists, item_topics, alpha):
    """Redundancy-discounted DCG of each row of ``lists``."""
    if use_numba():
        return alpha_dcg_rows_nb(np.ascontiguousarray(lists), item_topics, alpha)
    return alpha_dcg_rows_np(lists, item_topics, alpha)


# ---------------------------------------------------------------------------
# intra-list average cosine distance
# ---------------------------------------------------------------------------


@njit(cache=True)
def ilad_rows_nb(lists, unit_vectors):
    n, k = lists.shape
    d = unit_vectors.shape[1]
    out = np.empty(n, dtype=np.float64)
    for r in range(n):
        acc = 0.0
        for a in range(k):
            va = lists[r, a]
            for b in range(a + 1, k):
                vb = lists[r, b]
                dot = 0.0
                for c in range(d):
                    dot += unit_vectors[va, c] * unit_vectors[vb, c]
                acc += 1.0 - dot
        out[r] = acc / (k * (k - 1) / 2.0)
    return out


def ilad_rows_np(lists, unit_vectors):
    x = unit_vectors[lists]
    gram = np.einsum("nkd,njd->nkj", x, x)
    k = lists.shape[1]
    off = gram.sum(axis=(1, 2)) - np.trace(gram, axis1=1, axis2=2)
    return 1.0 - off / (k * (k - 1))


def ilad_rows(lists, unit_vectors):
    """Mean pairwise ``1 - cos`` within each row of ``lists``.

    ``unit_vectors`` holds one L2-normalised item vector per row.
    """
    if use_numba():
        return ilad_rows_nb(np.ascontiguousarray(lists), np.ascontiguousarray(unit_vectors))
    return ilad_rows_np(lists, unit_vectors)


# ---------------------------------------------------------------------------
# greedy maximal-marginal-relevance selection
# ---------------------------------------------------------------------------


@njit(cache=True)
def mmr_select_nb(pool, rel, unit_vectors, theta, k):
    n, p = pool.shape
    d = unit_vectors.shape[1]
    out = np.empty((n, k), dtype=np.int64)
    max_sim = np.empty(p, dtype=np.float64)
    taken = np.zeros(p, dtype=np.bool_)
    for r in range(n):
        taken[:] = False
        max_sim[:] = -np.inf
        last = 0  # pool[r] is relevance-sorted; position 0 is the argmax
        for step in range(k):
            if step > 0:
                best = -1
                best_val = -np.inf
                for q in range(p):
                    if taken[q]:
                        continue
                    val = theta * rel[r, q] - (1.0 - theta) * max_sim[q]
                    if best < 0 or val > best_val or (val == best_val and pool[r, q] < pool[r, best]):
                        best = q
                        best_val = val
                last = best
            taken[last] = True
            out[r, step] = pool[r, last]
            vl = pool[r, last]
            for q in range(p):
                if taken[q]:
                    continue
                dot = 0.0
                vq = pool[r, q]
                for c in range(d):
                    dot += unit_vectors[vl, c] * unit_vectors[vq, c]
                if dot > max_sim[q]:
                    max_sim[q] = dot
    return out


def mmr_select_np(pool, rel, unit_vectors, theta, k):
    n, p = pool.shape
    out = np.empty((n, k), dtype=np.int64)
    rows = np.arange(n)
    taken = np.zeros((n, p), dtype=bool)
    max_sim = np.full((n, p), -np.inf)
    pool_vecs = unit_vectors[pool]
    last = np.zeros(n, dtype=np.int64)
    big = np.iinfo(np.int64).max
    for step in range(k):
        if step > 0:
            val = theta * rel - (1.0 - theta) * max_sim
            val[taken] = -np.inf
            best_val = val.max(axis=1, keepdims=True)
            cand = np.where(val == best_val, pool, big)
            last = cand.argmin(axis=1)
        taken[rows, last] = True
        out[:, step] = pool[rows, last]
        sim = np.einsum("npd,nd->np", pool_vecs, pool_vecs[rows, last])
        np.maximum(max_sim, sim, out=max_sim)
    return out


def mmr_select(pool, rel, unit_vectors, theta, k):
    """Greedy MMR over per-user candidate pools.

    ``pool`` rows are item ids sorted by descending relevance, ``rel`` the
    matching relevance scores.
    """
    pool = np.ascontiguousarray(pool, dtype=np.int64)
    rel = np.ascontiguousarray(rel, dtype=np.float64)
    if use_numba():
        return mmr_select_nb(pool, rel, np.ascontiguousarray(unit_vectors), float(theta), k)
    return mmr_select_np(pool, rel, unit_vectors, float(theta), k)


# ---------------------------------------------------------------------------
# fused Adam step
# ---------------------------------------------------------------------------


@njit(cache=True)
def adam_step_nb(param, grad, m, v, lr, beta1, beta2, eps, t):
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    p = param.ravel()
    g = grad.ravel()
    mm = m.ravel()
    vv = v.ravel()
    for i in range(p.shape[0]):
        mm[i] = beta1 * mm[i] + (1.0 - beta1) * g[i]
        vv[i] = beta2 * vv[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= lr * (mm[i] / c1) / (np.sqrt(vv[i] / c2) + eps)


def adam_step_np(param, grad, m, v, lr, beta1, beta2, eps, t):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    param -= lr * (m / (1.0 - beta1**t)) / (np.sqrt(v / (1.0 - beta2**t)) + eps)


def adam_step(param, grad, m, v, lr, beta1, beta2, eps, t):
    """In-place Adam update of a C-contiguous float64 parameter array."""
    if use_numba():
        adam_step_nb(param, grad, m, v, lr, beta1, beta2, eps, t)
    else:
        adam_step_np(param, grad, m, v, lr, beta1, beta2, eps, t)
