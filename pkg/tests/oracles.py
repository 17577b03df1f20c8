"""Independent reference implementations used as test oracles.

Nothing here imports the package under test; every function is written
directly from the textbook definition with plain loops or scipy.
"""

import math

import numpy as np
import scipy.linalg


def aq_oracle(M, t):
    """M is a list of rows, row k holds m(f^(k+1), T^(1..k+1)); t is 1-based."""
    total = 0.0
    for i in range(t):
        total += M[t - 1][i]
    return total / t


def aiq_oracle(M):
    T = len(M)
    return sum(aq_oracle(M, t) for t in range(1, T + 1)) / T


def afq_oracle(M):
    return aq_oracle(M, len(M))


def fr_oracle(M, larger_is_better):
    T = len(M)
    total = 0.0
    for t in range(T - 1):
        first = M[t][t]
        final = M[T - 1][t]
        total += (first - final) if larger_is_better else (final - first)
    return total / (T - 1)


def fid_oracle(x, y):
    """Frechet distance of Gaussian fits using scipy's matrix square root."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mu1, mu2 = x.mean(0), y.mean(0)
    s1, s2 = np.cov(x, rowvar=False), np.cov(y, rowvar=False)
    covmean = scipy.linalg.sqrtm(s1 @ s2)
    covmean = np.real(covmean)
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(s1 + s2 - 2 * covmean))


def gaussian_with_exact_stats(mean, cov, n, rng):
    """n samples whose empirical mean and (ddof=1) covariance equal the targets exactly."""
    d = len(mean)
    z = rng.standard_normal((n, d))
    z -= z.mean(0)
    emp = np.cov(z, rowvar=False)
    whiten = np.linalg.inv(np.linalg.cholesky(emp))
    z = z @ whiten.T
    return z @ np.linalg.cholesky(cov).T + mean


def linear_schedule_oracle(T, beta_start, beta_end):
    """(betas, alpha_bars) for t = 1..T via explicit cumulative product loops."""
    betas = [beta_start + (beta_end - beta_start) * k / (T - 1) for k in range(T)]
    alpha_bars, running = [], 1.0
    for b in betas:
        running *= 1.0 - b
        alpha_bars.append(running)
    return np.array(betas), np.array(alpha_bars)


def reservoir_oracle(stream, capacity, rng):
    """Algorithm R written from scratch."""
    buf = []
    for n, item in enumerate(stream):
        if n < capacity:
            buf.append(item)
        else:
            j = rng.integers(0, n + 1)
            if j < capacity:
                buf[j] = item
    return buf


def agem_oracle(g, g_ref):
    g = np.asarray(g, dtype=np.float64)
    r = np.asarray(g_ref, dtype=np.float64)
    dot = float(g @ r)
    if dot >= 0 or float(r @ r) == 0:
        return g
    return g - dot / float(r @ r) * r


def softplus(x):
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def max_fd_relative_error(loss_fn, params, grads, h=1e-6):
    """Largest |numeric - analytic| / max(|numeric|, 1e-8) over every scalar parameter.

    ``loss_fn()`` must be deterministic; parameters are perturbed in place and restored.
    """
    worst = 0.0
    for p, g in zip(params, grads):
        flat, gflat = p.data.view(-1), g.reshape(-1)
        for k in range(flat.numel()):
            old = flat[k].item()
            flat[k] = old + h
            up = float(loss_fn().detach())
            flat[k] = old - h
            down = float(loss_fn().detach())
            flat[k] = old
            numeric = (up - down) / (2 * h)
            worst = max(worst, abs(numeric - float(gflat[k])) / max(abs(numeric), 1e-8))
    return worst
