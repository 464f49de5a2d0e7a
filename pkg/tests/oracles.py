"""Independent reference implementations used as test oracles.

Everything here is written with plain scalar loops or closed forms, sharing
no code with the library, so agreement is evidence rather than tautology.
"""

from __future__ import annotations

import math

import numpy as np


# -- image quality -------------------------------------------------------------


def psnr_loops(a, b, max_value):
    """PSNR via an explicit double loop over pixels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    assert a.shape == b.shape
    total = 0.0
    n = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            d = a[i, j] - b[i, j]
            total += d * d
            n += 1
    mse = total / n
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value * max_value / mse)


def ssim_loops(a, b, window=7, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM with a uniform window, valid positions only, scalar loops.

    Window statistics use unbiased (n-1) variance/covariance.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    assert a.shape == b.shape
    h, w = a.shape
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    n = window * window
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            sa = sb = saa = sbb = sab = 0.0
            for di in range(window):
                for dj in range(window):
                    x = a[i + di, j + dj]
                    y = b[i + di, j + dj]
                    sa += x
                    sb += y
                    saa += x * x
                    sbb += y * y
                    sab += x * y
            mua = sa / n
            mub = sb / n
            va = (saa - n * mua * mua) / (n - 1)
            vb = (sbb - n * mub * mub) / (n - 1)
            vab = (sab - n * mua * mub) / (n - 1)
            num = (2 * mua * mub + c1) * (2 * vab + c2)
            den = (mua * mua + mub * mub + c1) * (va + vb + c2)
            vals.append(num / den)
    return float(np.mean(vals))


# -- spectral ------------------------------------------------------------------


def dft_loops(x):
    """Naive O(n^2) discrete Fourier transform."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.size
    out = np.zeros(n, dtype=np.complex128)
    for k in range(n):
        acc = 0.0 + 0.0j
        for t in range(n):
            acc += x[t] * np.exp(-2j * math.pi * k * t / n)
        out[k] = acc
    return out


# -- statistics ----------------------------------------------------------------


def accuracy_loop(predictions, labels):
    """Correct-count / total with an explicit loop."""
    preds = list(int(p) for p in predictions)
    labs = list(int(y) for y in labels)
    assert len(preds) == len(labs)
    correct = 0
    for p, y in zip(preds, labs):
        if p == y:
            correct += 1
    return correct / len(labs)


def gaussian_kl_closed_form(m1, v1, m2, v2):
    """KL(N(m1,v1) || N(m2,v2)) evaluated directly from the closed form."""
    return 0.5 * (math.log(v2 / v1) + (v1 + (m1 - m2) ** 2) / v2 - 1.0)
