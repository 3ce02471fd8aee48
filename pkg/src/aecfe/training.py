"""Adam training loop with domain-balanced minibatches and resumable checkpoints."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import losses, network
from .datamodel import Dataset
from .errors import DivergenceError
from .network import ModelConfig

log = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "feat_mse", "image_ssim", "da", "total")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 30
    batch_size: int = 128
    beta: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 4:
            raise ValueError("learning_rate > 0, epochs >= 0 and batch_size >= 4 required")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


@dataclass
class LossHistory:
    epochs: list = field(default_factory=list)
    reports: list = field(default_factory=list)

    def append(self, epoch: int, report: losses.LossReport):
        self.epochs.append(epoch)
        self.reports.append(report)

    def __len__(self):
        return len(self.reports)

    @property
    def totals(self) -> list:
        return [r.total for r in self.reports]

    def rows(self):
        for e, r in zip(self.epochs, self.reports):
            yield e, r.feat_mse, r.image_ssim_term, r.da_term, r.total

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_HEADER)
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    @classmethod
    def read_csv(cls, path) -> "LossHistory":
        hist = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            if tuple(next(reader)) != HISTORY_HEADER:
                raise ValueError("unexpected loss history header")
            for row in reader:
                hist.append(int(row[0]), losses.LossReport(*(float(v) for v in row[1:])))
        return hist


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 0xBA7C4]))


def domain_balanced_batches(train: Dataset, batch_size: int, seed: int, epoch: int) -> list:
    """Index batches in which every domain contributes at least two records.

    Each domain is permuted independently and dealt into the same number of
    near-equal chunks, so every record appears exactly once per epoch.
    """
    domains = np.asarray(train.domains)
    ids = np.unique(domains)
    members = [np.flatnonzero(domains == k) for k in ids]
    smallest = min(len(m) for m in members)
    if smallest < 2:
        raise ValueError("every domain needs at least 2 training records")
    n_batches = max(1, -(-len(domains) // batch_size))
    n_batches = min(n_batches, smallest // 2)
    rng = epoch_rng(seed, epoch)
    chunks = [np.array_split(rng.permutation(m), n_batches) for m in members]
    return [np.concatenate([c[b] for c in chunks]) for b in range(n_batches)]


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    """Bias-corrected Adam update; returns new (params, state)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"divergence detected: non-finite gradient in {name}")
    t = state.t + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        with np.errstate(over="ignore", invalid="ignore"):
            new_params[name] = (p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(p.dtype)
        if not np.all(np.isfinite(new_params[name])):
            raise DivergenceError(f"divergence detected: update overflowed {name}")
        new_m[name], new_v[name] = m.astype(p.dtype), v.astype(p.dtype)
    return new_params, AdamState(new_m, new_v, t)


def images_to_model(images: np.ndarray, dtype) -> np.ndarray:
    """(N, S, S, 3) uint8 -> (N, 3, S, S) in [0, 1]."""
    return (np.asarray(images).transpose(0, 3, 1, 2) / 255.0).astype(dtype)


def batch_step(params, batch: Dataset, model_cfg: ModelConfig, loss_cfg: losses.LossConfig):
    dt = model_cfg.dtype
    h = batch.features.astype(dt)
    r = images_to_model(batch.images, dt)
    fp = network.forward(h, params, model_cfg)
    report, g = losses.total_loss(h, fp.h_hat, r, fp.r_hat, fp.z, batch.domains, loss_cfg)
    grads = network.backward(fp, g.z, g.h_hat, g.r_hat, params, model_cfg)
    return report, grads


def _mean_report(reports, beta) -> losses.LossReport:
    feat = float(np.mean([r.feat_mse for r in reports]))
    img = float(np.mean([r.image_ssim_term for r in reports]))
    da = float(np.mean([r.da_term for r in reports]))
    return losses.LossReport(feat, img, da, feat + img + beta * da)


@dataclass
class TrainResult:
    params: dict
    history: LossHistory
    opt_state: AdamState
    epoch: int  # last completed epoch (1-based)


def train(
    ds: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    *,
    init: Optional[tuple] = None,
    checkpoint_dir=None,
    on_epoch: Optional[Callable[[int, losses.LossReport], None]] = None,
) -> TrainResult:
    """Optimize the full objective over ``ds`` (normally the train split).

    ``init`` is an optional (params, opt_state, completed_epoch) triple used to
    resume; epochs then continue from ``completed_epoch + 1``.
    """
    if len(np.unique(ds.domains)) < 2 and train_cfg.beta > 0:
        raise ValueError("domain alignment needs at least two domains")
    if ds.meta.feature_dim != model_cfg.input_dim or ds.meta.image_side != model_cfg.image_side:
        raise ValueError("dataset dimensions do not match the model config")
    if init is None:
        params = network.init_params(model_cfg, train_cfg.seed)
        state = AdamState.zeros_like(params)
        start = 0
    else:
        params, state, start = init
        network.check_params(params, model_cfg)
        params = network.cast_params(params, model_cfg.dtype)
        state = AdamState(network.cast_params(state.m, model_cfg.dtype),
                          network.cast_params(state.v, model_cfg.dtype), state.t)
    loss_cfg = losses.LossConfig(beta=train_cfg.beta)
    history = LossHistory()
    epoch = start
    for epoch in range(start + 1, train_cfg.epochs + 1):
        reports = []
        for b, idx in enumerate(domain_balanced_batches(ds, train_cfg.batch_size, train_cfg.seed, epoch)):
            report, grads = batch_step(params, ds.subset(idx), model_cfg, loss_cfg)
            if not np.isfinite(report.total):
                raise DivergenceError(f"divergence detected: non-finite loss at epoch {epoch}, batch {b}")
            try:
                params, state = adam_step(params, grads, state, train_cfg)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} (epoch {epoch}, batch {b})") from None
            reports.append(report)
        summary = _mean_report(reports, train_cfg.beta)
        history.append(epoch, summary)
        log.info("epoch %d feat=%.5f img=%.5f da=%.5f total=%.5f", epoch, summary.feat_mse,
                 summary.image_ssim_term, summary.da_term, summary.total)
        if on_epoch is not None:
            on_epoch(epoch, summary)
        if checkpoint_dir is not None and train_cfg.checkpoint_every and epoch % train_cfg.checkpoint_every == 0:
            from .featio import save_checkpoint

            save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch:04d}.aeck", params, state, epoch, model_cfg)
    return TrainResult(params, history, state, epoch)


@dataclass(frozen=True)
class LatentMatrix:
    latents: np.ndarray  # (n, Z)
    domains: np.ndarray
    labels: np.ndarray
    record_ids: np.ndarray


def extract_latents(params: dict, ds: Dataset, model_cfg: ModelConfig, batch_size: int = 256) -> LatentMatrix:
    """Encode every record, preserving record order."""
    if ds.meta.feature_dim != model_cfg.input_dim:
        raise ValueError("dataset feature_dim does not match the model")
    network.check_params(params, model_cfg)
    out = np.zeros((len(ds), model_cfg.latent_dim), dtype=model_cfg.dtype)
    for start in range(0, len(ds), batch_size):
        out[start:start + batch_size] = network.encode(ds.features[start:start + batch_size], params, model_cfg)
    return LatentMatrix(out, ds.domains.copy(), ds.labels.copy(), ds.record_ids.copy())
