"""Independent reference implementations used as test oracles.

Everything here is deliberately written the slow, obvious way (explicit
loops, direct formulas) and shares no code with the package under test.
"""

from __future__ import annotations

import math

import numpy as np


def conv_oracle(x: np.ndarray, w: np.ndarray, stride, padding: str) -> np.ndarray:
    """Nested-loop N-D convolution; x [*spatial, Cin], w [*k, Cin, Cout]."""
    nd = w.ndim - 2
    spatial = x.shape[:-1]
    kern = w.shape[:nd]
    cin, cout = w.shape[-2], w.shape[-1]
    outs, pad_before = [], []
    for n, k, s in zip(spatial, kern, stride):
        if padding == "same":
            o = math.ceil(n / s)
            total = max((o - 1) * s + k - n, 0)
            pb = total // 2
        else:
            o = (n - k) // s + 1
            pb = 0
        outs.append(o)
        pad_before.append(pb)
    y = np.zeros((*outs, cout))
    for out_idx in np.ndindex(*outs):
        for k_idx in np.ndindex(*kern):
            src = tuple(
                out_idx[i] * stride[i] + k_idx[i] - pad_before[i] for i in range(nd)
            )
            if any(si < 0 or si >= spatial[i] for i, si in enumerate(src)):
                continue
            for ci in range(cin):
                for co in range(cout):
                    y[(*out_idx, co)] += x[(*src, ci)] * w[(*k_idx, ci, co)]
    return y


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f with respect to array x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Elementwise relative error with an absolute floor for tiny entries."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def dft_magnitudes(frame: np.ndarray) -> np.ndarray:
    """One-sided DFT magnitude by direct summation (no FFT)."""
    n = frame.size
    bins = n // 2 + 1
    out = np.zeros(bins)
    for k in range(bins):
        re = sum(frame[t] * math.cos(2 * math.pi * k * t / n) for t in range(n))
        im = -sum(frame[t] * math.sin(2 * math.pi * k * t / n) for t in range(n))
        out[k] = math.hypot(re, im)
    return out


def dct2_ortho_oracle(x: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-II of a vector by direct cosine summation."""
    n = x.size
    out = np.zeros(n)
    for k in range(n):
        s = sum(x[t] * math.cos(math.pi * k * (2 * t + 1) / (2 * n)) for t in range(n))
        scale = math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n)
        out[k] = scale * s
    return out


def ridge_regression_r2(
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_dev: np.ndarray,
    y_dev: np.ndarray,
    lam: float = 1e-3,
) -> float:
    """Mean per-output R^2 of a ridge regression fit on the train pairs."""
    xm = x_train.mean(axis=0)
    ym = y_train.mean(axis=0)
    xc = x_train - xm
    yc = y_train - ym
    w = np.linalg.solve(xc.T @ xc + lam * np.eye(xc.shape[1]), xc.T @ yc)
    pred = (x_dev - xm) @ w + ym
    ss_res = ((y_dev - pred) ** 2).sum(axis=0)
    ss_tot = ((y_dev - y_dev.mean(axis=0)) ** 2).sum(axis=0)
    keep = ss_tot > 0
    return float(np.mean(1.0 - ss_res[keep] / ss_tot[keep]))
