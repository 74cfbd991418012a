# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: plateau-suppressed local maxima and ranked AP."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def local_maxima(double[:, ::1] a):
    """Return ``(ys, xs, values)`` of 8-neighbourhood maxima in row-major order.

    A pixel qualifies when its value is > 0 and >= every in-bounds
    neighbour. Connected groups of qualifying pixels (which necessarily
    share one value) are reported once, at their row-major-first pixel.
    """
    cdef Py_ssize_t h = a.shape[0], w = a.shape[1]
    cdef Py_ssize_t i, j, di, dj, ni, nj, top, ci, cj, n_out = 0
    cdef double v
    cdef bint ok
    cand_arr = np.zeros((h, w), dtype=np.uint8)
    cdef unsigned char[:, ::1] cand = cand_arr
    seen_arr = np.zeros((h, w), dtype=np.uint8)
    cdef unsigned char[:, ::1] seen = seen_arr
    stack_arr = np.empty(2 * h * w + 2, dtype=np.intp)
    cdef Py_ssize_t[::1] stack = stack_arr
    ys_arr = np.empty(h * w, dtype=np.intp)
    xs_arr = np.empty(h * w, dtype=np.intp)
    cdef Py_ssize_t[::1] ys = ys_arr
    cdef Py_ssize_t[::1] xs = xs_arr

    for i in range(h):
        for j in range(w):
            v = a[i, j]
            if not v > 0:
                continue
            ok = True
            for di in range(-1, 2):
                ni = i + di
                if ni < 0 or ni >= h:
                    continue
                for dj in range(-1, 2):
                    nj = j + dj
                    if nj < 0 or nj >= w or (di == 0 and dj == 0):
                        continue
                    if a[ni, nj] > v:
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                cand[i, j] = 1

    for i in range(h):
        for j in range(w):
            if cand[i, j] == 0 or seen[i, j]:
                continue
            ys[n_out] = i
            xs[n_out] = j
            n_out += 1
            seen[i, j] = 1
            top = 0
            stack[top] = i
            stack[top + 1] = j
            top = 2
            while top > 0:
                top -= 2
                ci = stack[top]
                cj = stack[top + 1]
                for di in range(-1, 2):
                    ni = ci + di
                    if ni < 0 or ni >= h:
                        continue
                    for dj in range(-1, 2):
                        nj = cj + dj
                        if nj < 0 or nj >= w:
                            continue
                        if cand[ni, nj] and not seen[ni, nj]:
                            seen[ni, nj] = 1
                            stack[top] = ni
                            stack[top + 1] = nj
                            top += 2

    ys_out = ys_arr[:n_out].copy()
    xs_out = xs_arr[:n_out].copy()
    vals = np.asarray(a)[ys_out, xs_out]
    return ys_out, xs_out, vals


def ranked_average_precision(const unsigned char[::1] ranked_labels):
    """AP of a label sequence already sorted by descending score."""
    cdef Py_ssize_t n = ranked_labels.shape[0], r
    cdef long hits = 0
    cdef double total = 0.0
    for r in range(n):
        if ranked_labels[r]:
            hits += 1
            total += <double>hits / <double>(r + 1)
    if hits == 0:
        return float("nan")
    return total / hits


def ranked_average_precision_11pt(const unsigned char[::1] ranked_labels):
    """11-point interpolated AP of a label sequence sorted by descending score."""
    cdef Py_ssize_t n = ranked_labels.shape[0], r
    cdef long hits = 0, npos = 0
    cdef double t, best, total = 0.0, rec, prec
    cdef int q
    for r in range(n):
        if ranked_labels[r]:
            npos += 1
    if npos == 0:
        return float("nan")
    for q in range(11):
        t = q / 10.0
        best = 0.0
        hits = 0
        for r in range(n):
            if ranked_labels[r]:
                hits += 1
            rec = <double>hits / npos
            prec = <double>hits / (r + 1)
            if rec >= t and prec > best:
                best = prec
        total += best
    return total / 11.0
