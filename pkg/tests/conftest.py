import numpy as np
import pytest

from aecfe.datamodel import Dataset, DatasetMeta
from aecfe.synthgen import GenSpec, gen_dataset

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_dataset(domains, labels, feature_dim=4, image_side=2, num_classes=None, num_domains=None, seed=0):
    """Tiny in-memory dataset with random features and images."""
    domains = np.asarray(domains)
    labels = np.asarray(labels)
    n = len(domains)
    rng = np.random.default_rng(seed)
    meta = DatasetMeta(
        feature_dim=feature_dim,
        image_side=image_side,
        num_classes=int(labels.max()) + 1 if num_classes is None else num_classes,
        num_domains=int(domains.max()) + 1 if num_domains is None else num_domains,
        seed=seed,
    )
    return Dataset(
        features=rng.uniform(-1, 1, (n, feature_dim)).astype(np.float32),
        images=rng.integers(0, 256, (n, image_side, image_side, 3), dtype=np.uint8),
        domains=domains,
        labels=labels,
        record_ids=np.arange(n),
        meta=meta,
    )


SMALL_SPEC = GenSpec(num_domains=3, num_classes=3, per_class_per_domain=6, image_side=16, feature_dim=32, seed=7)


@pytest.fixture(scope="session")
def small_dataset():
    return gen_dataset(SMALL_SPEC)


@pytest.fixture(scope="session")
def default_dataset():
    return gen_dataset(GenSpec())


def toy_problem(seed=0, batch=12, n_domains=3):
    """Toy f64 model with a random batch for gradient checks."""
    from aecfe import network

    cfg = network.toy_config("f64")
    params = network.init_params(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    # nudge GN affines and biases off their defaults so every path is exercised
    for name, p in params.items():
        if not name.endswith(".W"):
            params[name] = p + rng.normal(0.0, 0.1, p.shape)
    h = rng.uniform(-0.9, 0.9, (batch, cfg.input_dim))
    r = rng.uniform(0.0, 1.0, (batch, 3, cfg.image_side, cfg.image_side))
    domains = np.arange(batch) % n_domains
    return cfg, params, h, r, domains


def full_objective(params, cfg, h, r, domains, beta=5.0):
    from aecfe import losses, network

    fp = network.forward(h, params, cfg)
    report, grads = losses.total_loss(h, fp.h_hat, r, fp.r_hat, fp.z, domains, losses.LossConfig(beta=beta))
    return report, fp, grads


def max_rel_grad_error(params, cfg, h, r, domains, beta=5.0, step=1e-5, floor=1e-6):
    """Worst relative error of analytic vs central-difference gradients over every parameter."""
    from aecfe import network

    _, fp, g = full_objective(params, cfg, h, r, domains, beta)
    analytic = network.backward(fp, g.z, g.h_hat, g.r_hat, params, cfg)
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = full_objective(params, cfg, h, r, domains, beta)[0].total
            flat[i] = orig - step
            down = full_objective(params, cfg, h, r, domains, beta)[0].total
            flat[i] = orig
            num = (up - down) / (2 * step)
            ana = analytic[name].reshape(-1)[i]
            err = abs(num - ana) / max(abs(num), abs(ana), floor)
            worst = max(worst, err)
    return worst


# toy_problem(4) keeps every ReLU input at least 1e-3 away from zero, far beyond
# what a 1e-5 parameter step can move it; other seeds put a unit within 1e-5
# of the kink, where central differences straddle it and stop being an oracle
GRADCHECK_SEED = 4


def relu_margin(params, cfg, h):
    """Smallest |pre-activation| feeding any ReLU in the full forward pass."""
    from aecfe import network

    margin = np.inf
    x = np.asarray(h)
    for ops in (network.encoder_ops(cfg), network.feat_decoder_ops(cfg), network.image_decoder_ops(cfg)):
        for op in ops:
            if op[0] == "relu":
                margin = min(margin, float(np.min(np.abs(x))))
            x = network._run([op], x, params, cfg)[0]
    return margin


def small_model_config(precision="f32"):
    """Model sized for SMALL_SPEC datasets (D=32, 16x16 images)."""
    from aecfe.network import ModelConfig

    return ModelConfig(
        input_dim=32, latent_dim=8,
        encoder_widths=(32, 24, 16, 16, 16, 8),
        feat_decoder_widths=(16, 24, 32),
        image_side=16, seed_side=4, image_channels=(16, 8, 8, 8),
        upsample_strides=(2, 2, 1, 1), gn_groups=8, precision=precision,
    )
