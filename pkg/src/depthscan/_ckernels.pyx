# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-pixel depth-to-normals stencil and BVH closest-point queries."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


cdef inline int _tangent(
    const double[:, :, ::1] P, const unsigned char[:, ::1] m,
    Py_ssize_t i, Py_ssize_t j, int di, int dj, Py_ssize_t h, Py_ssize_t w,
    double* t, double* wp, double* wc, double* wm,
) nogil:
    cdef bint has_prev = 0
    cdef bint has_next = 0
    cdef Py_ssize_t ip = i - di, jp = j - dj, inx = i + di, jn = j + dj
    cdef int k
    if ip >= 0 and jp >= 0 and m[ip, jp]:
        has_prev = 1
    if inx < h and jn < w and m[inx, jn]:
        has_next = 1
    if has_prev and has_next:
        wp[0] = 0.5; wc[0] = 0.0; wm[0] = 0.5
    elif has_next:
        wp[0] = 1.0; wc[0] = -1.0; wm[0] = 0.0
    elif has_prev:
        wp[0] = 0.0; wc[0] = 1.0; wm[0] = 1.0
    else:
        return 0
    for k in range(3):
        t[k] = wc[0] * P[i, j, k]
        if wp[0] != 0.0:
            t[k] += wp[0] * P[inx, jn, k]
        if wm[0] != 0.0:
            t[k] -= wm[0] * P[ip, jp, k]
    return 1


cdef inline void _cross(const double* a, const double* b, double* out) nogil:
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


cdef cnp.ndarray _points(const double[:, ::1] depth, const unsigned char[:, ::1] m,
                         double f, double cx, double cy):
    cdef Py_ssize_t h = depth.shape[0], w = depth.shape[1], i, j
    cdef cnp.ndarray[double, ndim=3, mode="c"] P = np.zeros((h, w, 3))
    cdef double z
    for i in range(h):
        for j in range(w):
            if m[i, j]:
                z = depth[i, j]
                P[i, j, 0] = (j - cx) / f * z
                P[i, j, 1] = (i - cy) / f * z
                P[i, j, 2] = z
    return P


def delta_forward(const double[:, ::1] depth, const unsigned char[:, ::1] mask,
                  double f, double cx, double cy):
    cdef Py_ssize_t h = depth.shape[0], w = depth.shape[1], i, j
    cdef double[:, :, ::1] P = _points(depth, mask, f, cx, cy)
    out_arr = np.empty((h, w, 3))
    cdef double[:, :, ::1] out = out_arr
    cdef double tu[3]
    cdef double tv[3]
    cdef double c[3]
    cdef double wp, wc, wm, nrm, s
    with nogil:
        for i in range(h):
            for j in range(w):
                out[i, j, 0] = 0.0
                out[i, j, 1] = 0.0
                out[i, j, 2] = -1.0
                if not mask[i, j]:
                    continue
                if not _tangent(P, mask, i, j, 0, 1, h, w, tu, &wp, &wc, &wm):
                    continue
                if not _tangent(P, mask, i, j, 1, 0, h, w, tv, &wp, &wc, &wm):
                    continue
                _cross(tu, tv, c)
                nrm = sqrt(c[0] * c[0] + c[1] * c[1] + c[2] * c[2])
                if not nrm > 0:
                    continue
                s = -1.0 if c[2] > 0 else 1.0
                out[i, j, 0] = s * c[0] / nrm
                out[i, j, 1] = s * c[1] / nrm
                out[i, j, 2] = s * c[2] / nrm
    return out_arr


def delta_vjp(const double[:, ::1] depth, const unsigned char[:, ::1] mask,
              double f, double cx, double cy, const double[:, :, ::1] cot):
    cdef Py_ssize_t h = depth.shape[0], w = depth.shape[1], i, j
    cdef int k
    cdef double[:, :, ::1] P = _points(depth, mask, f, cx, cy)
    gP_arr = np.zeros((h, w, 3))
    cdef double[:, :, ::1] gP = gP_arr
    grad_arr = np.zeros((h, w))
    cdef double[:, ::1] grad = grad_arr
    cdef double tu[3]
    cdef double tv[3]
    cdef double c[3]
    cdef double gc[3]
    cdef double gtu[3]
    cdef double gtv[3]
    cdef double wpu, wcu, wmu, wpv, wcv, wmv, nrm, s, radial
    with nogil:
        for i in range(h):
            for j in range(w):
                if not mask[i, j]:
                    continue
                if not _tangent(P, mask, i, j, 0, 1, h, w, tu, &wpu, &wcu, &wmu):
                    continue
                if not _tangent(P, mask, i, j, 1, 0, h, w, tv, &wpv, &wcv, &wmv):
                    continue
                _cross(tu, tv, c)
                nrm = sqrt(c[0] * c[0] + c[1] * c[1] + c[2] * c[2])
                if not nrm > 0:
                    continue
                s = -1.0 if c[2] > 0 else 1.0
                radial = (c[0] * cot[i, j, 0] + c[1] * cot[i, j, 1] + c[2] * cot[i, j, 2]) / nrm
                for k in range(3):
                    gc[k] = (cot[i, j, k] - c[k] / nrm * radial) * s / nrm
                _cross(tv, gc, gtu)
                _cross(gc, tu, gtv)
                for k in range(3):
                    gP[i, j, k] += wcu * gtu[k] + wcv * gtv[k]
                    if wpu != 0.0:
                        gP[i, j + 1, k] += wpu * gtu[k]
                    if wmu != 0.0:
                        gP[i, j - 1, k] -= wmu * gtu[k]
                    if wpv != 0.0:
                        gP[i + 1, j, k] += wpv * gtv[k]
                    if wmv != 0.0:
                        gP[i - 1, j, k] -= wmv * gtv[k]
        for i in range(h):
            for j in range(w):
                if mask[i, j]:
                    grad[i, j] = (
                        gP[i, j, 0] * (j - cx) / f
                        + gP[i, j, 1] * (i - cy) / f
                        + gP[i, j, 2]
                    )
    return grad_arr


cdef inline double _dot(const double* a, const double* b) nogil:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


cdef void _closest_on_triangle(const double* p, const double* a, const double* b,
                               const double* c, double* out) nogil:
    cdef double ab[3]
    cdef double ac[3]
    cdef double ap[3]
    cdef double bp[3]
    cdef double cp[3]
    cdef double d1, d2, d3, d4, d5, d6, va, vb, vc, t, denom
    cdef int k
    for k in range(3):
        ab[k] = b[k] - a[k]
        ac[k] = c[k] - a[k]
        ap[k] = p[k] - a[k]
    d1 = _dot(ab, ap)
    d2 = _dot(ac, ap)
    if d1 <= 0 and d2 <= 0:
        for k in range(3):
            out[k] = a[k]
        return
    for k in range(3):
        bp[k] = p[k] - b[k]
    d3 = _dot(ab, bp)
    d4 = _dot(ac, bp)
    if d3 >= 0 and d4 <= d3:
        for k in range(3):
            out[k] = b[k]
        return
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        t = d1 / (d1 - d3)
        for k in range(3):
            out[k] = a[k] + t * ab[k]
        return
    for k in range(3):
        cp[k] = p[k] - c[k]
    d5 = _dot(ab, cp)
    d6 = _dot(ac, cp)
    if d6 >= 0 and d5 <= d6:
        for k in range(3):
            out[k] = c[k]
        return
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        t = d2 / (d2 - d6)
        for k in range(3):
            out[k] = a[k] + t * ac[k]
        return
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        for k in range(3):
            out[k] = b[k] + t * (c[k] - b[k])
        return
    denom = 1.0 / (va + vb + vc)
    for k in range(3):
        out[k] = a[k] + ab[k] * (vb * denom) + ac[k] * (vc * denom)


cdef inline double _box_dist2(const double* p, const double[:, ::1] lo,
                              const double[:, ::1] hi, Py_ssize_t n) nogil:
    cdef double d, acc = 0.0
    cdef int k
    for k in range(3):
        d = 0.0
        if p[k] < lo[n, k]:
            d = lo[n, k] - p[k]
        elif p[k] > hi[n, k]:
            d = p[k] - hi[n, k]
        acc += d * d
    return acc


def closest_points_bvh(
    const double[:, ::1] vertices, const long[:, ::1] triangles,
    const double[:, ::1] node_lo, const double[:, ::1] node_hi,
    const long[::1] node_left, const long[::1] node_right,
    const long[::1] node_start, const long[::1] node_count,
    const long[::1] tri_order, const double[:, ::1] queries,
):
    cdef Py_ssize_t n_q = queries.shape[0], q, n, t, top, k, near, far
    dist_arr = np.empty(n_q)
    pts_arr = np.zeros((n_q, 3))
    tri_arr = np.full(n_q, -1, dtype=np.int64)
    cdef double[::1] dist = dist_arr
    cdef double[:, ::1] pts = pts_arr
    cdef long[::1] tri_out = tri_arr
    cdef Py_ssize_t n_nodes = node_lo.shape[0]
    stack_arr = np.empty(max(n_nodes, 1) + 2, dtype=np.int64)
    cdef long[::1] stack = stack_arr
    cdef double p[3]
    cdef double a[3]
    cdef double b[3]
    cdef double c[3]
    cdef double cand[3]
    cdef double best, d2, dl, dr, dx
    cdef long tri
    with nogil:
        for q in range(n_q):
            for k in range(3):
                p[k] = queries[q, k]
            best = INFINITY
            top = 0
            if n_nodes > 0:
                stack[0] = 0
                top = 1
            while top > 0:
                top -= 1
                n = stack[top]
                if _box_dist2(p, node_lo, node_hi, n) >= best:
                    continue
                if node_left[n] < 0:
                    for t in range(node_start[n], node_start[n] + node_count[n]):
                        tri = tri_order[t]
                        for k in range(3):
                            a[k] = vertices[triangles[tri, 0], k]
                            b[k] = vertices[triangles[tri, 1], k]
                            c[k] = vertices[triangles[tri, 2], k]
                        _closest_on_triangle(p, a, b, c, cand)
                        d2 = 0.0
                        for k in range(3):
                            dx = cand[k] - p[k]
                            d2 += dx * dx
                        if d2 < best or (d2 == best and tri < tri_out[q]):
                            best = d2
                            tri_out[q] = tri
                            for k in range(3):
                                pts[q, k] = cand[k]
                else:
                    dl = _box_dist2(p, node_lo, node_hi, node_left[n])
                    dr = _box_dist2(p, node_lo, node_hi, node_right[n])
                    # push the farther child first so the nearer one is visited next
                    if dl <= dr:
                        near = node_left[n]; far = node_right[n]
                    else:
                        near = node_right[n]; far = node_left[n]
                    stack[top] = far
                    stack[top + 1] = near
                    top += 2
            dist[q] = sqrt(best)
    return dist_arr, pts_arr, tri_arr
