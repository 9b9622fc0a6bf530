"""Slow, obviously-correct reference implementations used by the tests."""

import itertools
import math

import numpy as np


def raster_iou(a, b, cells_per_px: int = 1) -> float:
    """IoU by counting grid cells whose centres fall inside each box."""
    x1, y1 = min(a.extent()[0], b.extent()[0]), min(a.extent()[1], b.extent()[1])
    x2, y2 = max(a.extent()[2], b.extent()[2]), max(a.extent()[3], b.extent()[3])
    step = 1.0 / cells_per_px
    xs = np.arange(math.floor(x1), math.ceil(x2), step) + step / 2
    ys = np.arange(math.floor(y1), math.ceil(y2), step) + step / 2
    gx, gy = np.meshgrid(xs, ys)

    def inside(box):
        bx1, by1, bx2, by2 = box.extent()
        return (gx >= bx1) & (gx < bx2) & (gy >= by1) & (gy < by2)

    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def naive_conv(x, kernel, bias, stride, pad):
    """Direct six-loop cross-correlation over a single ``(H, W, C)`` input."""
    h, w, cin = x.shape
    k = kernel.shape[0]
    cout = kernel.shape[3]
    xp = np.zeros((h + 2 * pad, w + 2 * pad, cin))
    xp[pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = bias[o]
                for di in range(k):
                    for dj in range(k):
                        for c in range(cin):
                            acc += xp[i * stride + di, j * stride + dj, c] * kernel[di, dj, c, o]
                out[i, j, o] = acc
    return out


def naive_maxpool(x, k, s):
    h, w, c = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    out = np.empty((ho, wo, c))
    for i in range(ho):
        for j in range(wo):
            for ch in range(c):
                out[i, j, ch] = max(x[i * s + a, j * s + b, ch] for a in range(k) for b in range(k))
    return out


def naive_forward(spec, weights, patch):
    """Layer-by-layer forward pass built from the naive kernels."""
    from dualtrack import features as F

    x = np.asarray(patch, dtype=np.float64)
    x = x - x.mean()
    acts = []
    for layer, p in zip(spec.layers, weights.params):
        if isinstance(layer, F.Conv):
            x = naive_conv(x, p[0], p[1], layer.stride, layer.pad)
        elif isinstance(layer, F.MaxPool):
            x = naive_maxpool(x, layer.kernel, layer.stride)
        elif isinstance(layer, F.ReLU):
            x = np.where(x > 0, x, 0.0)
        elif isinstance(layer, F.FullyConnected):
            x = np.array([sum(v * p[0][i, o] for i, v in enumerate(x.ravel())) + p[1][o]
                          for o in range(p[0].shape[1])])
        elif isinstance(layer, F.Softmax):
            e = np.exp(x - x.max())
            x = e / e.sum()
        acts.append(x)
    return acts


def svm_primal(w_aug, xa, y, C):
    return 0.5 * w_aug @ w_aug + C * np.maximum(0.0, 1.0 - y * (xa @ w_aug)).sum()


def brute_force_svm(x, y, C):
    """Solve the bias-augmented L1-SVM dual by enumerating active sets.

    Every dual variable is either 0, C, or free; for each assignment the free
    variables solve a linear system.  The best feasible KKT point is the
    optimum.  Exponential, so only for a handful of points.
    """
    xa = np.hstack([x, np.ones((len(x), 1))])
    n = len(y)
    Q = (y[:, None] * y[None, :]) * (xa @ xa.T)
    best = None
    for states in itertools.product((0, 1, 2), repeat=n):
        alpha = np.zeros(n)
        free = [i for i, s in enumerate(states) if s == 1]
        upper = [i for i, s in enumerate(states) if s == 2]
        alpha[upper] = C
        if free:
            F_ = np.array(free)
            rhs = 1.0 - Q[np.ix_(F_, upper)].sum(axis=1) * C if upper else np.ones(len(free))
            sol, *_ = np.linalg.lstsq(Q[np.ix_(F_, F_)], rhs, rcond=None)
            if np.any(sol < -1e-12) or np.any(sol > C + 1e-12):
                continue
            alpha[F_] = np.clip(sol, 0.0, C)
        w = (alpha * y) @ xa
        obj = svm_primal(w, xa, y, C)
        if best is None or obj < best[0]:
            best = (obj, w)
    return best


def hand_f_score(ious, thresh=0.5):
    tp = sum(v >= thresh for v in ious)
    p = r = tp / len(ious)
    return 0.0 if tp == 0 else 2 * p * r / (p + r)


def trapezoid(xs, ys):
    xs = [(x - xs[0]) / (xs[-1] - xs[0]) for x in xs]
    total = 0.0
    for i in range(1, len(xs)):
        total += (xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1]) / 2.0
    return total
