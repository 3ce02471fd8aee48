"""Two-stage autoencoder: dense encoder, dense feature decoder, transposed-conv image decoder.

Every layer has a hand-written backward pass. Parameters live in a flat,
insertion-ordered ``dict[str, ndarray]``; layer stacks are described as op
lists so forward and backward walk the same structure.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConfigError

N_ENCODER_LAYERS = 6
N_FEAT_DECODER_LAYERS = 3
N_UPSAMPLE = 4


def _geometric_widths(start: int, end: int, n: int, multiple: int) -> tuple:
    widths = []
    for i in range(1, n):
        w = start * (end / start) ** (i / n)
        widths.append(max(multiple, int(round(w / multiple)) * multiple))
    return tuple(widths) + (end,)


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 256
    latent_dim: int = 50
    encoder_widths: Optional[tuple] = None
    feat_decoder_widths: Optional[tuple] = None
    image_side: int = 64
    seed_side: int = 4
    image_channels: tuple = (64, 32, 16, 8)  # seed channels, then outputs of the first 3 upsamplings
    upsample_strides: tuple = (2, 2, 2, 2)
    gn_groups: int = 8
    gn_eps: float = 1e-5
    precision: str = "f32"

    def __post_init__(self):
        g = self.gn_groups
        if self.encoder_widths is None:
            object.__setattr__(self, "encoder_widths", _geometric_widths(
                self.input_dim, self.latent_dim, N_ENCODER_LAYERS, g))
        if self.feat_decoder_widths is None:
            object.__setattr__(self, "feat_decoder_widths", _geometric_widths(
                self.latent_dim, self.input_dim, N_FEAT_DECODER_LAYERS, g))
        for name in ("encoder_widths", "feat_decoder_widths", "image_channels", "upsample_strides"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        if len(self.encoder_widths) != N_ENCODER_LAYERS or self.encoder_widths[-1] != self.latent_dim:
            raise ConfigError(f"encoder needs {N_ENCODER_LAYERS} widths ending in latent_dim")
        if (len(self.feat_decoder_widths) != N_FEAT_DECODER_LAYERS
                or self.feat_decoder_widths[-1] != self.input_dim):
            raise ConfigError(f"feature decoder needs {N_FEAT_DECODER_LAYERS} widths ending in input_dim")
        if len(self.image_channels) != N_UPSAMPLE or len(self.upsample_strides) != N_UPSAMPLE:
            raise ConfigError(f"image decoder needs {N_UPSAMPLE} channel counts and strides")
        if self.gn_groups < 1 or self.gn_eps <= 0:
            raise ConfigError("gn_groups must be >= 1 and gn_eps > 0")
        for c in self.encoder_widths[:-1] + self.image_channels:
            if c % self.gn_groups:
                raise ConfigError(f"gn_groups={self.gn_groups} does not divide channel count {c}")
        if min(self.upsample_strides) < 1:
            raise ConfigError("strides must be >= 1")
        if self.seed_side * int(np.prod(self.upsample_strides)) != self.image_side:
            raise ConfigError("seed_side * prod(upsample_strides) must equal image_side")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def digest(self) -> bytes:
        """Shape digest; precision is excluded since checkpoints always store f32."""
        shape = {k: v for k, v in asdict(self).items() if k != "precision"}
        return hashlib.sha256(json.dumps(shape, sort_keys=True).encode()).digest()[:16]


# --- op lists ---------------------------------------------------------------

def encoder_ops(cfg: ModelConfig) -> list:
    ops = []
    for i in range(N_ENCODER_LAYERS):
        ops.append(("dense", f"enc{i}"))
        if i < N_ENCODER_LAYERS - 1:
            ops += [("gn", f"enc{i}"), ("relu",)]
    ops.append(("tanh",))
    return ops


def feat_decoder_ops(cfg: ModelConfig) -> list:
    ops = []
    for i in range(N_FEAT_DECODER_LAYERS):
        ops.append(("dense", f"fdec{i}"))
        if i < N_FEAT_DECODER_LAYERS - 1:
            ops.append(("relu",))
    ops.append(("tanh",))
    return ops


def image_decoder_ops(cfg: ModelConfig) -> list:
    c0 = cfg.image_channels[0]
    ops = [("dense", "idec_seed"), ("reshape", (c0, cfg.seed_side, cfg.seed_side)),
           ("gn", "idec_seed"), ("relu",)]
    for j, stride in enumerate(cfg.upsample_strides):
        ops.append(("convT", f"idec_up{j}", stride))
        if j < N_UPSAMPLE - 1:
            ops += [("gn", f"idec_up{j}"), ("relu",)]
    ops.append(("sigmoid",))
    return ops


def param_shapes(cfg: ModelConfig) -> dict:
    shapes = {}
    prev = cfg.input_dim
    for i, w in enumerate(cfg.encoder_widths):
        shapes[f"enc{i}.W"], shapes[f"enc{i}.b"] = (prev, w), (w,)
        if i < N_ENCODER_LAYERS - 1:
            shapes[f"enc{i}.gn_scale"], shapes[f"enc{i}.gn_shift"] = (w,), (w,)
        prev = w
    for i, w in enumerate(cfg.feat_decoder_widths):
        shapes[f"fdec{i}.W"], shapes[f"fdec{i}.b"] = (prev, w), (w,)
        prev = w
    c0 = cfg.image_channels[0]
    n_seed = c0 * cfg.seed_side * cfg.seed_side
    shapes["idec_seed.W"], shapes["idec_seed.b"] = (cfg.input_dim, n_seed), (n_seed,)
    shapes["idec_seed.gn_scale"], shapes["idec_seed.gn_shift"] = (c0,), (c0,)
    outs = cfg.image_channels[1:] + (3,)
    for j, (cin, cout, s) in enumerate(zip(cfg.image_channels, outs, cfg.upsample_strides)):
        k = s + 2
        shapes[f"idec_up{j}.W"], shapes[f"idec_up{j}.b"] = (cin, cout, k, k), (cout,)
        if j < N_UPSAMPLE - 1:
            shapes[f"idec_up{j}.gn_scale"], shapes[f"idec_up{j}.gn_shift"] = (cout,), (cout,)
    return shapes


_OUTPUT_LAYERS = {f"enc{N_ENCODER_LAYERS - 1}", f"fdec{N_FEAT_DECODER_LAYERS - 1}",
                  f"idec_up{N_UPSAMPLE - 1}"}


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """He-uniform for ReLU layers, Glorot-uniform for tanh/sigmoid output layers."""
    rng = np.random.default_rng([int(seed), 0xAEC])
    params = {}
    for name, shape in param_shapes(cfg).items():
        layer, kind = name.split(".")
        if kind == "W":
            if len(shape) == 2:
                fan_in, fan_out = shape
            else:
                cin, cout, k, _ = shape
                stride = k - 2
                fan_in, fan_out = cin * k * k / stride**2, cout * k * k / stride**2
            if layer in _OUTPUT_LAYERS:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
            else:
                limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape)
        elif kind == "gn_scale":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return cast_params(params, cfg.dtype)


def cast_params(params: dict, dtype) -> dict:
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def check_params(params: dict, cfg: ModelConfig):
    shapes = param_shapes(cfg)
    if list(params) != list(shapes):
        raise ConfigError("parameter names do not match the model config")
    for name, shape in shapes.items():
        if params[name].shape != tuple(shape):
            raise ConfigError(f"{name}: shape {params[name].shape} != {shape}")


# --- layers -----------------------------------------------------------------

def _gn_forward(x, groups, scale, shift, eps):
    n, c = x.shape[:2]
    if c % groups:
        raise ConfigError(f"{c} channels not divisible into {groups} groups")
    xg = x.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    return xhat * scale.reshape(bshape) + shift.reshape(bshape), (xhat, inv, scale, groups)


def _gn_backward(dy, cache):
    xhat, inv, scale, groups = cache
    n, c = dy.shape[:2]
    axes = (0,) + tuple(range(2, dy.ndim))
    dscale = np.sum(dy * xhat, axis=axes)
    dshift = np.sum(dy, axis=axes)
    bshape = (1, c) + (1,) * (dy.ndim - 2)
    dxhat = (dy * scale.reshape(bshape)).reshape(n, groups, -1)
    xh = xhat.reshape(n, groups, -1)
    m = xh.shape[2]
    dx = inv / m * (m * dxhat - dxhat.sum(axis=2, keepdims=True)
                    - xh * np.sum(dxhat * xh, axis=2, keepdims=True))
    return dx.reshape(dy.shape), dscale, dshift


def group_norm(x, groups: int, scale=None, shift=None, eps: float = 1e-5) -> np.ndarray:
    """Per-sample normalization over channel groups of a channel-major (N, C, ...) tensor."""
    x = np.asarray(x)
    c = x.shape[1]
    scale = np.ones(c, dtype=x.dtype) if scale is None else np.asarray(scale, dtype=x.dtype)
    shift = np.zeros(c, dtype=x.dtype) if shift is None else np.asarray(shift, dtype=x.dtype)
    return _gn_forward(x, groups, scale, shift, eps)[0]


def _convT_forward(x, w, b, stride):
    # kernel = stride + 2 with padding 1 gives an output exactly stride times larger
    n, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    cols = (x.transpose(0, 2, 3, 1).reshape(-1, cin) @ w.reshape(cin, -1)).reshape(n, h, wd, cout, k, k)
    full = np.zeros((n, cout, (h - 1) * stride + k, (wd - 1) * stride + k), dtype=x.dtype)
    hs, ws = (h - 1) * stride + 1, (wd - 1) * stride + 1
    for ki in range(k):
        for kj in range(k):
            full[:, :, ki:ki + hs:stride, kj:kj + ws:stride] += cols[..., ki, kj].transpose(0, 3, 1, 2)
    y = full[:, :, 1:1 + h * stride, 1:1 + wd * stride] + b.reshape(1, cout, 1, 1)
    return y, (x, w, stride)


def _convT_backward(dy, cache):
    x, w, stride = cache
    n, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    full = np.zeros((n, cout, (h - 1) * stride + k, (wd - 1) * stride + k), dtype=dy.dtype)
    full[:, :, 1:1 + h * stride, 1:1 + wd * stride] = dy
    hs, ws = (h - 1) * stride + 1, (wd - 1) * stride + 1
    dcols = np.empty((n, h, wd, cout, k, k), dtype=dy.dtype)
    for ki in range(k):
        for kj in range(k):
            dcols[..., ki, kj] = full[:, :, ki:ki + hs:stride, kj:kj + ws:stride].transpose(0, 2, 3, 1)
    dcols = dcols.reshape(-1, cout * k * k)
    xf = x.transpose(0, 2, 3, 1).reshape(-1, cin)
    dw = (xf.T @ dcols).reshape(w.shape)
    dx = (dcols @ w.reshape(cin, -1).T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


def _run(ops, x, params, cfg):
    caches = []
    for op in ops:
        kind = op[0]
        if kind == "dense":
            w, b = params[f"{op[1]}.W"], params[f"{op[1]}.b"]
            caches.append(x)
            x = x @ w + b
        elif kind == "gn":
            x, cache = _gn_forward(x, cfg.gn_groups, params[f"{op[1]}.gn_scale"],
                                   params[f"{op[1]}.gn_shift"], cfg.gn_eps)
            caches.append(cache)
        elif kind == "relu":
            mask = x > 0
            caches.append(mask)
            x = x * mask
        elif kind == "tanh":
            x = np.tanh(x)
            caches.append(x)
        elif kind == "sigmoid":
            x = 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free logistic
            caches.append(x)
        elif kind == "reshape":
            caches.append(x.shape)
            x = x.reshape((x.shape[0],) + op[1])
        elif kind == "convT":
            x, cache = _convT_forward(x, params[f"{op[1]}.W"], params[f"{op[1]}.b"], op[2])
            caches.append(cache)
        else:
            raise ValueError(f"unknown op {kind}")
    return x, caches


def _backprop(ops, caches, dy, params, grads):
    for op, cache in zip(reversed(ops), reversed(caches)):
        kind = op[0]
        if kind == "dense":
            grads[f"{op[1]}.W"] = cache.T @ dy
            grads[f"{op[1]}.b"] = dy.sum(axis=0)
            dy = dy @ params[f"{op[1]}.W"].T
        elif kind == "gn":
            dy, grads[f"{op[1]}.gn_scale"], grads[f"{op[1]}.gn_shift"] = _gn_backward(dy, cache)
        elif kind == "relu":
            dy = dy * cache
        elif kind == "tanh":
            dy = dy * (1.0 - cache * cache)
        elif kind == "sigmoid":
            dy = dy * cache * (1.0 - cache)
        elif kind == "reshape":
            dy = dy.reshape(cache)
        elif kind == "convT":
            dy, grads[f"{op[1]}.W"], grads[f"{op[1]}.b"] = _convT_backward(dy, cache)
    return dy


# --- public API -------------------------------------------------------------

def _as_batch(v, width, cfg, what):
    v = np.asarray(v, dtype=cfg.dtype)
    single = v.ndim == 1
    v = v.reshape(1, -1) if single else v
    if v.ndim != 2 or v.shape[1] != width:
        raise ValueError(f"{what} must have length {width}, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite {what}")
    return v, single


INFER_BLOCK = 64


def _run_blocked(ops, x, params, cfg):
    # Zero-padded blocks of fixed shape keep each output row bit-identical
    # whatever batch it arrived in (BLAS picks different kernels, and
    # rounding, for different matrix shapes).
    block = np.zeros((INFER_BLOCK,) + x.shape[1:], dtype=cfg.dtype)
    parts = []
    for start in range(0, len(x), INFER_BLOCK):
        chunk = x[start:start + INFER_BLOCK]
        block[:] = 0
        block[:len(chunk)] = chunk
        parts.append(_run(ops, block, params, cfg)[0][:len(chunk)])
    return np.concatenate(parts) if parts else _run(ops, x, params, cfg)[0]


def encode(h, params, cfg: ModelConfig) -> np.ndarray:
    """Latent code(s) in [-1, 1]^Z for one feature vector or a batch; batch-independent."""
    x, single = _as_batch(h, cfg.input_dim, cfg, "input features")
    z = _run_blocked(encoder_ops(cfg), x, params, cfg)
    return z[0] if single else z


def decode_features(z, params, cfg: ModelConfig) -> np.ndarray:
    x, single = _as_batch(z, cfg.latent_dim, cfg, "latent code")
    h_hat = _run_blocked(feat_decoder_ops(cfg), x, params, cfg)
    return h_hat[0] if single else h_hat


def decode_image(h_hat, params, cfg: ModelConfig) -> np.ndarray:
    """Image(s) in [0, 1], channel-major (3, S, S), from reconstructed features."""
    x, single = _as_batch(h_hat, cfg.input_dim, cfg, "reconstructed features")
    r_hat = _run_blocked(image_decoder_ops(cfg), x, params, cfg)
    return r_hat[0] if single else r_hat


class ForwardPass(NamedTuple):
    z: np.ndarray
    h_hat: np.ndarray
    r_hat: np.ndarray
    caches: tuple


def forward(h, params, cfg: ModelConfig) -> ForwardPass:
    """Batch forward through encoder, feature decoder, then image decoder on h_hat."""
    x, _ = _as_batch(h, cfg.input_dim, cfg, "input features")
    z, c_enc = _run(encoder_ops(cfg), x, params, cfg)
    h_hat, c_fdec = _run(feat_decoder_ops(cfg), z, params, cfg)
    r_hat, c_idec = _run(image_decoder_ops(cfg), h_hat, params, cfg)
    return ForwardPass(z, h_hat, r_hat, (c_enc, c_fdec, c_idec))


def backward(fp: ForwardPass, grad_z, grad_h_hat, grad_r_hat, params, cfg: ModelConfig) -> dict:
    """Parameter gradients given loss gradients at the three model outputs.

    Image-loss gradients reach the feature decoder and encoder through h_hat.
    """
    c_enc, c_fdec, c_idec = fp.caches
    grads = {}
    dt = cfg.dtype
    d_h = _backprop(image_decoder_ops(cfg), c_idec, np.asarray(grad_r_hat, dt), params, grads)
    d_h = d_h + np.asarray(grad_h_hat, dt)
    d_z = _backprop(feat_decoder_ops(cfg), c_fdec, d_h, params, grads)
    d_z = d_z + np.asarray(grad_z, dt)
    _backprop(encoder_ops(cfg), c_enc, d_z, params, grads)
    return {name: grads[name].astype(dt, copy=False) for name in params}


def encode_jacobian(h, params, cfg: ModelConfig) -> np.ndarray:
    """d z / d h for a single feature vector, shape (Z, D), by reverse mode."""
    x, _ = _as_batch(h, cfg.input_dim, cfg, "input features")
    ops = encoder_ops(cfg)
    _, caches = _run(ops, x[:1], params, cfg)
    jac = np.zeros((cfg.latent_dim, cfg.input_dim), dtype=cfg.dtype)
    for i in range(cfg.latent_dim):
        seed = np.zeros((1, cfg.latent_dim), dtype=cfg.dtype)
        seed[0, i] = 1.0
        jac[i] = _backprop(ops, caches, seed, params, {})[0]
    return jac


def toy_config(precision: str = "f64") -> ModelConfig:
    """Downsized model used for gradient verification (D=16, Z=8, 8x8 images)."""
    return ModelConfig(
        input_dim=16, latent_dim=8,
        encoder_widths=(16, 16, 12, 12, 8, 8),
        feat_decoder_widths=(12, 12, 16),
        image_side=8, seed_side=2, image_channels=(8, 8, 4, 4),
        upsample_strides=(2, 2, 1, 1), gn_groups=4, precision=precision,
    )
