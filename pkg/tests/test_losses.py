import numpy as np
import pytest

from aecfe import losses
from aecfe.losses import LossConfig, SsimConfig

from conftest import GRADCHECK_SEED, max_rel_grad_error, relu_margin, toy_problem


def test_feature_mse_basics():
    h = np.random.default_rng(0).normal(size=(4, 6))
    assert losses.feature_mse(h, h) == 0.0
    assert losses.feature_mse(h + 1, h) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError, match="shape mismatch"):
        losses.feature_mse(h, h[:, :5])


def test_feature_mse_matches_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(7, 5))
    total = 0.0
    for i in range(7):
        for j in range(5):
            total += (a[i, j] - b[i, j]) ** 2
    assert abs(losses.feature_mse(a, b) - total / 35) < 1e-6


def test_ssim_identity_and_constants():
    x = np.random.default_rng(2).uniform(size=(3, 8, 8))
    assert abs(losses.ssim(x, x) - 1.0) < 1e-12
    cfg = SsimConfig()
    zero, one = np.zeros((3, 4, 4)), np.ones((3, 4, 4))
    expected = cfg.c1 * cfg.c2 / ((1 + cfg.c1) * cfg.c2)
    assert losses.ssim(zero, one) == pytest.approx(expected, rel=1e-12)


def test_ssim_matches_direct_formula():
    rng = np.random.default_rng(3)
    x, y = rng.uniform(size=48), rng.uniform(size=48)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mx, my = x.mean(), y.mean()
    vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
    cxy = ((x - mx) * (y - my)).mean()
    expected = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    assert losses.ssim(x, y) == pytest.approx(expected, abs=1e-12)


def test_ssim_symmetric_and_bounded():
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(100, 3, 8, 8))
    y = rng.uniform(size=(100, 3, 8, 8))
    ab, ba = losses.ssim_batch(x, y), losses.ssim_batch(y, x)
    assert np.max(np.abs(ab - ba)) < 1e-7
    assert np.all((ab >= -1) & (ab <= 1))


def test_image_loss_is_batch_mean():
    rng = np.random.default_rng(5)
    x, y = rng.uniform(size=(6, 3, 4, 4)), rng.uniform(size=(6, 3, 4, 4))
    per_pair = [1 - losses.ssim(x[i], y[i]) for i in range(6)]
    assert losses.image_loss(x, y) == pytest.approx(np.mean(per_pair), abs=1e-12)
    assert losses.image_loss(y, y) == pytest.approx(0.0, abs=1e-12)


def test_image_loss_gradient():
    rng = np.random.default_rng(6)
    x, y = rng.uniform(size=(3, 3, 4, 4)), rng.uniform(size=(3, 3, 4, 4))
    g = losses.image_loss_grad(x, y)
    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + 1e-5
        up = losses.image_loss(x, y)
        flat[i] = orig - 1e-5
        down = losses.image_loss(x, y)
        flat[i] = orig
        num = (up - down) / 2e-5
        worst = max(worst, abs(num - g.reshape(-1)[i]) / max(abs(num), 1e-6))
    assert worst < 1e-3


def test_domain_stats_degenerate_and_oracle():
    z = np.tile(np.array([0.1, -0.2, 0.3, 0.0]), (4, 1))
    stats = losses.domain_stats(z, [0, 0, 1, 1])
    assert np.all(stats.covariances == 0)
    np.testing.assert_allclose(stats.softmaxed, 0.25)

    rng = np.random.default_rng(7)
    z = rng.normal(size=(30, 5))
    doms = np.repeat([0, 1], 15)
    stats = losses.domain_stats(z, doms)
    for k in range(2):
        zk = z[doms == k]
        mean = sum(zk) / len(zk)
        cov = np.zeros((5, 5))
        for row in zk:
            cov += np.outer(row - mean, row - mean)
        cov /= len(zk) - 1
        np.testing.assert_allclose(stats.covariances[k], cov, atol=1e-6)
        np.testing.assert_allclose(stats.means[k], mean, atol=1e-12)
    np.testing.assert_allclose(stats.softmaxed.sum(axis=2), 1.0)


def test_domain_stats_requires_two_samples():
    with pytest.raises(ValueError, match="insufficient domain samples for covariance"):
        losses.domain_stats(np.zeros((3, 2)), [0, 0, 1])


def test_da_loss_zero_cases():
    rng = np.random.default_rng(8)
    block = rng.normal(size=(6, 4))
    z = np.vstack([block, block, block])
    stats = losses.domain_stats(z, np.repeat([0, 1, 2], 6))
    assert losses.da_loss(stats) == 0.0
    only_anchor = losses.domain_stats(block, np.zeros(6, int))
    assert losses.da_loss(only_anchor) == 0.0


def test_da_loss_requires_anchor():
    stats = losses.domain_stats(np.random.default_rng(0).normal(size=(4, 2)), [1, 1, 2, 2])
    with pytest.raises(ValueError, match="anchor"):
        losses.da_loss(stats)


def test_symmetric_kl_is_symmetric():
    rng = np.random.default_rng(9)
    p = losses.row_softmax(rng.normal(size=(5, 5)))
    q = losses.row_softmax(rng.normal(size=(5, 5)))
    assert losses.symmetric_kl(p, q) == pytest.approx(losses.symmetric_kl(q, p), abs=1e-15)
    assert losses.symmetric_kl(p, p) == 0.0
    assert losses.symmetric_kl(p, q) > 0


def test_da_loss_matches_manual():
    rng = np.random.default_rng(10)
    z = rng.normal(size=(12, 3))
    doms = np.repeat([0, 1], 6)
    stats = losses.domain_stats(z, doms)
    s0, s1 = stats.softmaxed
    kl01 = np.mean([np.sum(s0[i] * np.log(s0[i] / s1[i])) for i in range(3)])
    kl10 = np.mean([np.sum(s1[i] * np.log(s1[i] / s0[i])) for i in range(3)])
    mse = np.mean((z[doms == 1].mean(0) - z[doms == 0].mean(0)) ** 2)
    assert losses.da_loss(stats) == pytest.approx(mse + 0.5 * (kl01 + kl10), abs=1e-12)


def test_da_gradient():
    rng = np.random.default_rng(11)
    z = rng.normal(size=(12, 4))
    doms = np.arange(12) % 3
    _, g = losses.da_loss_and_grad(z, doms)
    worst = 0.0
    for idx in np.ndindex(z.shape):
        orig = z[idx]
        z[idx] = orig + 1e-5
        up = losses.da_loss(losses.domain_stats(z, doms))
        z[idx] = orig - 1e-5
        down = losses.da_loss(losses.domain_stats(z, doms))
        z[idx] = orig
        num = (up - down) / 2e-5
        worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-6))
    assert worst < 1e-3


def test_total_loss_additivity():
    rng = np.random.default_rng(12)
    h, h_hat = rng.uniform(-1, 1, (9, 6)), rng.uniform(-1, 1, (9, 6))
    r, r_hat = rng.uniform(size=(9, 3, 4, 4)), rng.uniform(size=(9, 3, 4, 4))
    z = rng.uniform(-1, 1, (9, 5))
    doms = np.arange(9) % 3
    report, _ = losses.total_loss(h, h_hat, r, r_hat, z, doms, LossConfig(beta=5.0))
    assert report.total - (report.feat_mse + report.image_ssim_term) == pytest.approx(5.0 * report.da_term, abs=1e-12)
    assert report.da_term > 0


def test_total_loss_zero_when_perfect_and_aligned():
    rng = np.random.default_rng(13)
    h = rng.uniform(-1, 1, (6, 4))
    r = rng.uniform(size=(6, 3, 4, 4))
    block = rng.normal(size=(3, 2))
    z = np.vstack([block, block])
    report, _ = losses.total_loss(h, h, r, r, z, [0, 0, 0, 1, 1, 1])
    assert abs(report.total) < 1e-12


def test_beta_must_be_nonnegative():
    with pytest.raises(ValueError):
        LossConfig(beta=-1.0)


@pytest.mark.slow
def test_full_objective_gradient():
    cfg, params, h, r, domains = toy_problem(GRADCHECK_SEED)
    assert relu_margin(params, cfg, h) > 1e-3
    assert max_rel_grad_error(params, cfg, h, r, domains) < 1e-3
