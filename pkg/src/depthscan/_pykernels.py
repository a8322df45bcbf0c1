"""Vectorized numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or disabled through
``DEPTHSCAN_PURE_PYTHON=1``. Signatures match ``_ckernels`` exactly.
"""

import numpy as np


def _shift(a, di, dj, fill=0):
    """out[i, j] = a[i + di, j + dj], ``fill`` outside the grid."""
    out = np.full_like(a, fill)
    h, w = a.shape[:2]
    src_i = slice(max(di, 0), h + min(di, 0))
    dst_i = slice(max(-di, 0), h + min(-di, 0))
    src_j = slice(max(dj, 0), w + min(dj, 0))
    dst_j = slice(max(-dj, 0), w + min(-dj, 0))
    out[dst_i, dst_j] = a[src_i, src_j]
    return out


def _stencil(depth, mask, f, cx, cy):
    h, w = depth.shape
    m = mask.astype(bool)
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    rays = np.stack([(u - cx) / f, (v - cy) / f, np.ones_like(u)], axis=-1)
    P = rays * np.where(m, depth, 0.0)[..., None]

    L = _shift(m, 0, -1, False) & m
    R = _shift(m, 0, 1, False) & m
    U = _shift(m, -1, 0, False) & m
    D = _shift(m, 1, 0, False) & m

    # per-axis weights: tangent = wp * P[next] + wc * P[here] - wm * P[prev]
    def weights(prev, nxt):
        both = prev & nxt
        only_n = nxt & ~prev
        only_p = prev & ~nxt
        wp = np.where(both, 0.5, np.where(only_n, 1.0, 0.0))
        wm = np.where(both, 0.5, np.where(only_p, 1.0, 0.0))
        wc = np.where(only_n, -1.0, np.where(only_p, 1.0, 0.0))
        return wp, wc, wm, prev | nxt

    wpu, wcu, wmu, has_u = weights(L, R)
    wpv, wcv, wmv, has_v = weights(U, D)
    tu = (
        wpu[..., None] * _shift(P, 0, 1)
        + wcu[..., None] * P
        - wmu[..., None] * _shift(P, 0, -1)
    )
    tv = (
        wpv[..., None] * _shift(P, 1, 0)
        + wcv[..., None] * P
        - wmv[..., None] * _shift(P, -1, 0)
    )
    c = np.cross(tu, tv)
    nrm = np.sqrt(np.sum(c * c, axis=-1))
    ok = m & has_u & has_v & (nrm > 0)
    sign = np.where(c[..., 2] > 0, -1.0, 1.0)
    return dict(
        rays=rays, tu=tu, tv=tv, c=c, nrm=nrm, ok=ok, sign=sign,
        u_weights=(wpu, wcu, wmu), v_weights=(wpv, wcv, wmv),
    )


def delta_forward(depth, mask, f, cx, cy):
    st = _stencil(depth, mask, f, cx, cy)
    ok = st["ok"]
    out = np.empty(depth.shape + (3,))
    out[...] = (0.0, 0.0, -1.0)
    safe = np.where(ok, st["nrm"], 1.0)
    n = st["c"] * (st["sign"] / safe)[..., None]
    out[ok] = n[ok]
    return out


def delta_vjp(depth, mask, f, cx, cy, cot):
    st = _stencil(depth, mask, f, cx, cy)
    ok = st["ok"]
    safe = np.where(ok, st["nrm"], 1.0)
    nhat = st["c"] / safe[..., None]
    g = np.where(ok[..., None], cot, 0.0)
    radial = np.sum(nhat * g, axis=-1, keepdims=True)
    gc = (g - nhat * radial) * (st["sign"] / safe)[..., None]
    gtu = np.cross(st["tv"], gc)
    gtv = np.cross(gc, st["tu"])

    wpu, wcu, wmu = st["u_weights"]
    wpv, wcv, wmv = st["v_weights"]
    gP = wcu[..., None] * gtu + wcv[..., None] * gtv
    # contributions flowing to right/left and down/up neighbors
    gP += _shift(wpu[..., None] * gtu, 0, -1)
    gP -= _shift(wmu[..., None] * gtu, 0, 1)
    gP += _shift(wpv[..., None] * gtv, -1, 0)
    gP -= _shift(wmv[..., None] * gtv, 1, 0)
    grad = np.sum(gP * st["rays"], axis=-1)
    return np.where(mask.astype(bool), grad, 0.0)


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p; all arrays (M, 3).

    Voronoi-region classification after Ericson, evaluated for every row
    at once with a ``done`` mask standing in for early returns.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def take(cond, value):
        sel = cond & ~done
        out[sel] = value(sel)
        done[sel] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        take((d1 <= 0) & (d2 <= 0), lambda s: a[s])
        take((d3 >= 0) & (d4 <= d3), lambda s: b[s])
        take(
            (vc <= 0) & (d1 >= 0) & (d3 <= 0),
            lambda s: a[s] + (d1[s] / (d1[s] - d3[s]))[:, None] * ab[s],
        )
        take((d6 >= 0) & (d5 <= d6), lambda s: c[s])
        take(
            (vb <= 0) & (d2 >= 0) & (d6 <= 0),
            lambda s: a[s] + (d2[s] / (d2[s] - d6[s]))[:, None] * ac[s],
        )
        take(
            (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
            lambda s: b[s]
            + ((d4[s] - d3[s]) / ((d4[s] - d3[s]) + (d5[s] - d6[s])))[:, None] * (c[s] - b[s]),
        )
        rest = ~done
        denom = 1.0 / (va[rest] + vb[rest] + vc[rest])
        out[rest] = (
            a[rest]
            + ab[rest] * (vb[rest] * denom)[:, None]
            + ac[rest] * (vc[rest] * denom)[:, None]
        )
    return out


def _box_dist2(p, lo, hi):
    d = np.maximum(lo - p, 0.0) + np.maximum(p - hi, 0.0)
    return np.einsum("ij,ij->i", d, d)


def _leaf_candidates(q_idx, nodes, node_start, node_count, tri_order):
    """Expand (query, leaf) pairs into (query, triangle) pairs."""
    counts = node_count[nodes]
    rep_q = np.repeat(q_idx, counts)
    starts = np.repeat(node_start[nodes], counts)
    offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    return rep_q, tri_order[starts + offsets]


def _reduce_best(q, d2, tri, pts, best_d2, best_tri, best_pt):
    """Fold candidate distances into the running per-query minimum."""
    if len(q) == 0:
        return
    order = np.lexsort((tri, d2, q))
    q, d2, tri, pts = q[order], d2[order], tri[order], pts[order]
    first = np.ones(len(q), dtype=bool)
    first[1:] = q[1:] != q[:-1]
    q, d2, tri, pts = q[first], d2[first], tri[first], pts[first]
    better = d2 < best_d2[q]
    q = q[better]
    best_d2[q] = d2[better]
    best_tri[q] = tri[better]
    best_pt[q] = pts[better]


def closest_points_bvh(
    vertices, triangles, node_lo, node_hi, node_left, node_right,
    node_start, node_count, tri_order, queries,
):
    n_q = len(queries)
    best_d2 = np.full(n_q, np.inf)
    best_tri = np.full(n_q, -1, dtype=np.int64)
    best_pt = np.zeros((n_q, 3))
    if n_q == 0:
        return np.sqrt(best_d2), best_pt, best_tri
    va = vertices[triangles[:, 0]]
    vb = vertices[triangles[:, 1]]
    vc = vertices[triangles[:, 2]]

    def eval_leaves(q, nodes):
        rq, rt = _leaf_candidates(q, nodes, node_start, node_count, tri_order)
        pts = closest_point_on_triangles(queries[rq], va[rt], vb[rt], vc[rt])
        diff = pts - queries[rq]
        _reduce_best(rq, np.einsum("ij,ij->i", diff, diff), rt, pts, best_d2, best_tri, best_pt)

    # greedy descent toward the nearer child gives a tight initial bound
    q_all = np.arange(n_q)
    node = np.zeros(n_q, dtype=np.int64)
    while True:
        inner = node_left[node] >= 0
        if not inner.any():
            break
        qi = q_all[inner]
        l, r = node_left[node[inner]], node_right[node[inner]]
        dl = _box_dist2(queries[qi], node_lo[l], node_hi[l])
        dr = _box_dist2(queries[qi], node_lo[r], node_hi[r])
        node[inner] = np.where(dl <= dr, l, r)
    eval_leaves(q_all, node)

    fq = q_all
    fn = np.zeros(n_q, dtype=np.int64)
    while len(fq):
        lb = _box_dist2(queries[fq], node_lo[fn], node_hi[fn])
        keep = lb < best_d2[fq]
        fq, fn = fq[keep], fn[keep]
        leaf = node_left[fn] < 0
        if leaf.any():
            eval_leaves(fq[leaf], fn[leaf])
        fq, fn = fq[~leaf], fn[~leaf]
        fq = np.concatenate([fq, fq])
        fn = np.concatenate([node_left[fn], node_right[fn]])
    return np.sqrt(best_d2), best_pt, best_tri
