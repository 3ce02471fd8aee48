"""Training objective: feature MSE + (1 - SSIM) image term + beta * domain alignment.

All reductions run in float64; gradients are cast back to the caller's dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

ANCHOR = 0


@dataclass(frozen=True)
class SsimConfig:
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


@dataclass(frozen=True)
class LossConfig:
    beta: float = 5.0
    ssim: SsimConfig = SsimConfig()

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ValueError("beta must be finite and >= 0")


@dataclass(frozen=True)
class LossReport:
    feat_mse: float
    image_ssim_term: float
    da_term: float
    total: float


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def feature_mse(h_hat, h) -> float:
    h_hat, h = np.asarray(h_hat, np.float64), np.asarray(h, np.float64)
    _check_same(h_hat, h)
    return float(np.mean((h_hat - h) ** 2))


def feature_mse_grad(h_hat, h) -> np.ndarray:
    h_hat64, h64 = np.asarray(h_hat, np.float64), np.asarray(h, np.float64)
    return 2.0 * (h_hat64 - h64) / h64.size


def _ssim_parts(x, y, cfg):
    # x, y: (B, P) with every pixel and channel of one image pooled into a row
    n = x.shape[1]
    mx, my = x.mean(axis=1), y.mean(axis=1)
    dx, dy = x - mx[:, None], y - my[:, None]
    vx, vy = np.mean(dx * dx, axis=1), np.mean(dy * dy, axis=1)
    cxy = np.mean(dx * dy, axis=1)
    a = 2 * mx * my + cfg.c1
    b = 2 * cxy + cfg.c2
    c = mx * mx + my * my + cfg.c1
    d = vx + vy + cfg.c2
    return n, mx, my, dx, dy, a, b, c, d


def ssim_batch(x, y, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    """Per-pair SSIM from global image statistics (no sliding window)."""
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    _check_same(x, y)
    bx, by = x.reshape(len(x), -1), y.reshape(len(y), -1)
    _, _, _, _, _, a, b, c, d = _ssim_parts(bx, by, cfg)
    return a * b / (c * d)


def ssim(x, y, cfg: SsimConfig = SsimConfig()) -> float:
    x, y = np.asarray(x), np.asarray(y)
    _check_same(x, y)
    return float(ssim_batch(x[None], y[None], cfg)[0])


def _ssim_grad_x(x, y, cfg):
    """d SSIM(x_i, y_i) / d x_i for each pair, shaped like x."""
    bx = np.asarray(x, np.float64).reshape(len(x), -1)
    by = np.asarray(y, np.float64).reshape(len(y), -1)
    n, mx, my, dx, dy, a, b, c, d = _ssim_parts(bx, by, cfg)
    s = a * b / (c * d)
    col = lambda v: v[:, None]  # noqa: E731
    grad = (col(2 * my * b) + col(a) * 2 * dy) / (n * col(c * d)) \
        - col(s) * (col(2 * mx / c) + 2 * dx / col(d)) / n
    return grad.reshape(np.shape(x))


def image_loss(r_hat, r, cfg: SsimConfig = SsimConfig()) -> float:
    return float(np.mean(1.0 - ssim_batch(r_hat, r, cfg)))


def image_loss_grad(r_hat, r, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    return -_ssim_grad_x(r_hat, r, cfg) / len(r_hat)


@dataclass(frozen=True)
class DomainStats:
    domains: tuple  # sorted domain ids present; index 0 holds the anchor
    means: np.ndarray  # (K, Z)
    covariances: np.ndarray  # (K, Z, Z)
    softmaxed: np.ndarray  # (K, Z, Z) row-stochastic
    counts: np.ndarray  # (K,)

    def index(self, domain: int) -> int:
        return self.domains.index(domain)


def row_softmax(m: np.ndarray) -> np.ndarray:
    e = np.exp(m - m.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def domain_stats(z, domains) -> DomainStats:
    """Per-domain latent mean, unbiased covariance and its row-wise softmax."""
    z = np.asarray(z, np.float64)
    domains = np.asarray(domains)
    ids = tuple(int(k) for k in np.unique(domains))
    means, covs, counts = [], [], []
    for k in ids:
        zk = z[domains == k]
        if len(zk) < 2:
            raise ValueError(f"insufficient domain samples for covariance (domain {k})")
        mu = zk.mean(axis=0)
        zc = zk - mu
        means.append(mu)
        covs.append(zc.T @ zc / (len(zk) - 1))
        counts.append(len(zk))
    covs = np.array(covs)
    return DomainStats(ids, np.array(means), covs, row_softmax(covs), np.array(counts))


def _row_kl(p, q) -> float:
    return float(np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=-1)))


def symmetric_kl(p, q) -> float:
    """0.5 * (KL(p||q) + KL(q||p)), each KL the mean of row-wise KLs."""
    return 0.5 * (_row_kl(p, q) + _row_kl(q, p))


def da_loss(stats: DomainStats) -> float:
    """Sum over non-anchor domains of MSE(mu_k, mu_0) + symmetric KL(s_k, s_0)."""
    if ANCHOR not in stats.domains:
        raise ValueError("anchor domain 0 missing from domain statistics")
    a = stats.index(ANCHOR)
    total = 0.0
    for i in range(len(stats.domains)):
        if i == a:
            continue
        total += float(np.mean((stats.means[i] - stats.means[a]) ** 2))
        total += symmetric_kl(stats.softmaxed[i], stats.softmaxed[a])
    return total


def da_loss_and_grad(z, domains):
    """Domain-alignment loss of a latent batch and its gradient w.r.t. ``z``."""
    z64 = np.asarray(z, np.float64)
    domains = np.asarray(domains)
    stats = domain_stats(z64, domains)
    value = da_loss(stats)
    a = stats.index(ANCHOR)
    zdim = z64.shape[1]
    g_mu = np.zeros_like(stats.means)
    g_s = np.zeros_like(stats.softmaxed)
    s0 = stats.softmaxed[a]
    log_s0 = np.log(s0)
    for i in range(len(stats.domains)):
        if i == a:
            continue
        diff = stats.means[i] - stats.means[a]
        g_mu[i] += 2.0 * diff / zdim
        g_mu[a] -= 2.0 * diff / zdim
        sk = stats.softmaxed[i]
        log_sk = np.log(sk)
        # d/dp of 0.5 * mean_rows sum_j (p - q)(log p - log q)
        g_s[i] += 0.5 / zdim * (log_sk - log_s0 + 1.0 - s0 / sk)
        g_s[a] += 0.5 / zdim * (log_s0 - log_sk + 1.0 - sk / s0)
    grad = np.zeros_like(z64)
    for i, k in enumerate(stats.domains):
        rows = np.flatnonzero(domains == k)
        s = stats.softmaxed[i]
        g_cov = s * (g_s[i] - np.sum(g_s[i] * s, axis=1, keepdims=True))
        zc = z64[rows] - stats.means[i]
        n = len(rows)
        grad[rows] = zc @ (g_cov + g_cov.T) / (n - 1) + g_mu[i] / n
    return value, grad


class LossGrads(NamedTuple):
    z: np.ndarray
    h_hat: np.ndarray
    r_hat: np.ndarray


def total_loss(h, h_hat, r, r_hat, z, domains, cfg: LossConfig = LossConfig()):
    """LossReport plus gradients w.r.t. (z, h_hat, r_hat).

    With beta == 0 the alignment branch is skipped entirely.
    """
    feat = feature_mse(h_hat, h)
    img = image_loss(r_hat, r, cfg.ssim)
    g_h = feature_mse_grad(h_hat, h)
    g_r = image_loss_grad(r_hat, r, cfg.ssim)
    if cfg.beta > 0:
        da, g_z = da_loss_and_grad(z, domains)
        g_z = cfg.beta * g_z
    else:
        da, g_z = 0.0, np.zeros(np.shape(z))
    report = LossReport(feat, img, da, feat + img + cfg.beta * da)
    dt = np.asarray(z).dtype
    return report, LossGrads(g_z.astype(dt), g_h.astype(dt), g_r.astype(dt))
