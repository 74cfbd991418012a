"""Pure-Python versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def local_maxima(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    h, w = a.shape
    padded = np.pad(a, 1, constant_values=-np.inf)
    cand = a > 0
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            cand &= a >= padded[1 + di:1 + di + h, 1 + dj:1 + dj + w]

    seen = np.zeros_like(cand)
    ys, xs = [], []
    for i, j in zip(*np.nonzero(cand)):
        if seen[i, j]:
            continue
        ys.append(i)
        xs.append(j)
        seen[i, j] = True
        stack = [(i, j)]
        while stack:
            ci, cj = stack.pop()
            for ni in range(max(ci - 1, 0), min(ci + 2, h)):
                for nj in range(max(cj - 1, 0), min(cj + 2, w)):
                    if cand[ni, nj] and not seen[ni, nj]:
                        seen[ni, nj] = True
                        stack.append((ni, nj))
    ys = np.asarray(ys, dtype=np.intp)
    xs = np.asarray(xs, dtype=np.intp)
    return ys, xs, a[ys, xs]


def ranked_average_precision(ranked_labels):
    lab = np.asarray(ranked_labels, dtype=bool)
    if not lab.any():
        return float("nan")
    hits = np.cumsum(lab)
    prec = hits / np.arange(1, lab.size + 1)
    return float(prec[lab].sum() / lab.sum())


def ranked_average_precision_11pt(ranked_labels):
    lab = np.asarray(ranked_labels, dtype=bool)
    if not lab.any():
        return float("nan")
    hits = np.cumsum(lab)
    rec = hits / lab.sum()
    prec = hits / np.arange(1, lab.size + 1)
    total = 0.0
    for t in np.arange(11) / 10.0:
        mask = rec >= t
        total += prec[mask].max() if mask.any() else 0.0
    return total / 11.0
