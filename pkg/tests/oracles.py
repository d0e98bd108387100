"""Independent reference implementations used only by the test suite."""

import numpy as np


def naive_conv2d(x, k, stride=(1, 1), padding=(0, 0)):
    """Direct loop cross-correlation, accumulating over (c, i, j) in order."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    sh, sw = stride
    ph, pw = padding
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    xp[:, :, ph : ph + h, pw : pw + w] = x
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for r in range(ho):
                for s in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[b, ic, r * sh + i, s * sw + j] * k[oc, ic, i, j]
                    out[b, oc, r, s] = acc
    return out


def naive_conv2d_input_adjoint(g, k, x_shape, stride=(1, 1), padding=(0, 0)):
    """Scatter form of the convolution's input gradient, element by element."""
    n, c, h, w = x_shape
    o, _, kh, kw = k.shape
    sh, sw = stride
    ph, pw = padding
    gp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    ho, wo = g.shape[2:]
    for b in range(n):
        for oc in range(o):
            for r in range(ho):
                for s in range(wo):
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                gp[b, ic, r * sh + i, s * sw + j] += g[b, oc, r, s] * k[oc, ic, i, j]
    return gp[:, :, ph : ph + h, pw : pw + w]


def brute_force_1nn(train_x, train_y, test_x):
    """O(N^2) scan with squared Euclidean distance; ties keep the lowest train index."""
    preds = []
    for q in test_x:
        best, best_d = 0, None
        for i, p in enumerate(train_x):
            d = float(np.sum((q - p) ** 2))
            if best_d is None or d < best_d:
                best, best_d = i, d
        preds.append(train_y[best])
    return np.array(preds)


def edge_sum(z, edges):
    return sum((z[i] - z[j]) ** 2 for i, j in edges)


def pairwise_sum(z, W):
    m = len(z)
    return sum(W[i, j] * (z[i] - z[j]) ** 2 for i in range(m) for j in range(m))
