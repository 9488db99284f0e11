"""Pure numpy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_ckernels`` module. Used when
the extension is not built or when ``LISO_KERNELS=python`` is set.
"""
import numpy as np

_STENCIL = np.array([1.0, -4.0, 6.0, -4.0, 1.0])


def _sq_dist_rows(X, i, rows):
    # accumulate dims in order so rounding matches the compiled loop
    diff = X[rows, 0] - X[i, 0]
    acc = diff * diff
    for k in range(1, X.shape[1]):
        diff = X[rows, k] - X[i, k]
        acc += diff * diff
    return acc


def dbscan_labels(X, eps, min_pts):
    """Label points by DBSCAN; -1 marks noise.

    Clusters are numbered by their lowest-index core point. A border point
    joins the cluster of its lowest-index core neighbour.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    n = X.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    eps2 = eps * eps
    all_rows = np.arange(n)
    neighbours = [np.flatnonzero(_sq_dist_rows(X, i, all_rows) <= eps2) for i in range(n)]
    core = np.array([len(nb) >= min_pts for nb in neighbours])

    next_label = 0
    for i in range(n):
        if not core[i] or labels[i] >= 0:
            continue
        labels[i] = next_label
        stack = [i]
        while stack:
            u = stack.pop()
            for v in neighbours[u]:
                if core[v] and labels[v] < 0:
                    labels[v] = next_label
                    stack.append(v)
        next_label += 1

    for i in np.flatnonzero(~core):
        nb = neighbours[i]
        nb_core = nb[core[nb]]
        if len(nb_core):
            labels[i] = labels[nb_core.min()]
    return labels


def _corners(b):
    c, s = np.cos(b[6]), np.sin(b[6])
    hl, hw = 0.5 * b[3], 0.5 * b[4]
    local = np.array([[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + b[:2]


def _clip(subject, clipper):
    # Sutherland-Hodgman against a counter-clockwise convex clipper
    out = list(subject)
    m = len(clipper)
    for e in range(m):
        if not out:
            break
        ax, ay = clipper[e]
        bx, by = clipper[(e + 1) % m]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        k = len(inp)
        for j in range(k):
            px, py = inp[j - 1]
            qx, qy = inp[j]
            dp = ex * (py - ay) - ey * (px - ax)
            dq = ex * (qy - ay) - ey * (qx - ax)
            if dq >= 0.0:
                if dp < 0.0:
                    t = dp / (dp - dq)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
                out.append((qx, qy))
            elif dp >= 0.0:
                t = dp / (dp - dq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def _poly_area(poly):
    if len(poly) < 3:
        return 0.0
    area = 0.0
    k = len(poly)
    for j in range(k):
        x0, y0 = poly[j]
        x1, y1 = poly[(j + 1) % k]
        area += x0 * y1 - x1 * y0
    return abs(0.5 * area)


def bev_intersection(a, b):
    """Intersection area of the BEV footprints of two boxes ``(x,y,z,l,w,h,yaw)``."""
    ra = 0.5 * np.hypot(a[3], a[4])
    rb = 0.5 * np.hypot(b[3], b[4])
    if np.hypot(a[0] - b[0], a[1] - b[1]) > ra + rb:
        return 0.0
    poly = _clip([tuple(p) for p in _corners(a)], [tuple(p) for p in _corners(b)])
    return _poly_area(poly)


def _as_boxes(arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 7))
    return np.atleast_2d(arr)


def iou_matrix(A, B, use_3d=False):
    """Pairwise IoU between box arrays of shape (n, >=7) and (m, >=7)."""
    A = _as_boxes(A)
    B = _as_boxes(B)
    out = np.zeros((A.shape[0], B.shape[0]))
    for i in range(A.shape[0]):
        a = A[i]
        for j in range(B.shape[0]):
            b = B[j]
            inter = bev_intersection(a, b)
            if inter <= 0.0:
                continue
            if use_3d:
                top = min(a[2] + 0.5 * a[5], b[2] + 0.5 * b[5])
                bot = max(a[2] - 0.5 * a[5], b[2] - 0.5 * b[5])
                dz = top - bot
                if dz <= 0.0:
                    continue
                inter *= dz
                union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
            else:
                union = a[3] * a[4] + b[3] * b[4] - inter
            out[i, j] = min(1.0, max(0.0, inter / union))
    return out


def jerk_loss_grad(X, X_obs, lengths, beta, dt):
    """Batched smoothing objective and its gradient.

    ``X`` and ``X_obs`` have shape (n_tracks, T_max, 3); only the first
    ``lengths[k]`` rows of track ``k`` are used. Returns per-track losses and
    the gradient w.r.t. ``X`` (zero on padding).
    """
    X = np.asarray(X, dtype=np.float64)
    X_obs = np.asarray(X_obs, dtype=np.float64)
    n, tmax, _ = X.shape
    losses = np.zeros(n)
    grad = np.zeros_like(X)
    inv = 1.0 / dt ** 4
    # overflow yields inf like the compiled kernel; callers check finiteness
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            T = int(lengths[k])
            x = X[k, :T]
            res = x - X_obs[k, :T]
            losses[k] = beta * np.sum(res * res)
            grad[k, :T] = 2.0 * beta * res
            if T >= 5:
                r = inv * (x[:-4] - 4.0 * x[1:-3] + 6.0 * x[2:-2] - 4.0 * x[3:-1] + x[4:])
                losses[k] += np.sum(r * r)
                g = 2.0 * inv * r
                for off in range(5):
                    grad[k, off:T - 4 + off] += _STENCIL[off] * g
    return losses, grad
