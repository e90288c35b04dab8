"""Text-conditioned velocity network for the toy video generator.

The network maps a noised clip, an interpolation time, and a text embedding to
a per-pixel velocity. It is a small residual convolutional map: two 3x3 conv
layers with FiLM-style conditioning (per-channel scale/shift computed from the
sinusoidal time features and the text embedding), a residual connection, and
a linear conv head. Fixed sinusoidal frame-position and spatial-coordinate
features are concatenated to the input channels so captions can steer both
content and motion.

Forward and backward passes are written by hand in numpy; gradients are exact
and are verified against central finite differences in the test suite.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ValidationError

CHECKPOINT_MAGIC = b"FCKPT1\n"


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters; the parameter layout is a pure function
    of this config."""

    channels: int = 16
    text_dim: int = 64
    time_freqs: int = 4
    frame_freqs: int = 3
    spatial_freqs: int = 2
    dtype: str = "float32"

    @property
    def cond_dim(self) -> int:
        return 2 * self.time_freqs + self.text_dim

    @property
    def in_channels(self) -> int:
        return 3 + 2 * self.frame_freqs + 4 * self.spatial_freqs

    def np_dtype(self):
        return np.dtype(self.dtype)


def _sin_features(u: np.ndarray, n_freqs: int, dtype) -> np.ndarray:
    """Sinusoidal features of a coordinate in [0, 1].

    Uses pi * 2**j frequencies so cos of the base frequency stays injective
    over [0, 1] (top/bottom of the range must not alias).
    """
    u = np.asarray(u, dtype=dtype)
    if n_freqs == 0:
        return np.zeros(u.shape + (0,), dtype=dtype)
    freqs = (np.pi * (2.0 ** np.arange(n_freqs))).astype(dtype)
    angles = u[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1).astype(dtype)


def _axis_positions(n: int, dtype) -> np.ndarray:
    if n <= 1:
        return np.zeros(n, dtype=dtype)
    return (np.arange(n, dtype=dtype) / (n - 1)).astype(dtype)


_PARAM_LAYOUT = (
    # name, shape builder (functions of config)
    ("conv1_w", lambda c: (c.channels, 3, 3, c.in_channels)),
    ("conv1_b", lambda c: (c.channels,)),
    ("film1_gw", lambda c: (c.channels, c.cond_dim)),
    ("film1_gb", lambda c: (c.channels,)),
    ("film1_bw", lambda c: (c.channels, c.cond_dim)),
    ("film1_bb", lambda c: (c.channels,)),
    ("conv2_w", lambda c: (c.channels, 3, 3, c.channels)),
    ("conv2_b", lambda c: (c.channels,)),
    ("film2_gw", lambda c: (c.channels, c.cond_dim)),
    ("film2_gb", lambda c: (c.channels,)),
    ("film2_bw", lambda c: (c.channels, c.cond_dim)),
    ("film2_bb", lambda c: (c.channels,)),
    ("conv3_w", lambda c: (3, 3, 3, c.channels)),
    ("conv3_b", lambda c: (3,)),
    ("skip_w", lambda c: (3, 3)),
    ("skip_gw", lambda c: (3, c.cond_dim)),
    ("skip_gb", lambda c: (3,)),
)

PARAM_NAMES = tuple(name for name, _ in _PARAM_LAYOUT)

# Weight matrices eligible for low-rank adaptation; biases are excluded.
WEIGHT_NAMES = tuple(n for n in PARAM_NAMES if n.endswith("_w") or n.endswith("gw") or n.endswith("bw"))


def param_shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
    return {name: shape_fn(config) for name, shape_fn in _PARAM_LAYOUT}


def init_params(config: NetConfig, seed: int) -> dict[str, np.ndarray]:
    """Initialize parameters: 1/sqrt(fan_in) conv weights, small FiLM weights,
    zero biases. Deterministic in the seed."""
    rng = np.random.default_rng(seed)
    dtype = config.np_dtype()
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("_b") or name.endswith("gb") or name.endswith("bb"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name.startswith(("film", "skip")):
            params[name] = rng.normal(0.0, 0.01, size=shape).astype(dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape).astype(dtype)
    return params


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


def flatten_params(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([params[name].ravel() for name in PARAM_NAMES])


def unflatten_params(vector: np.ndarray, config: NetConfig) -> dict[str, np.ndarray]:
    shapes = param_shapes(config)
    out: dict[str, np.ndarray] = {}
    offset = 0
    for name in PARAM_NAMES:
        size = int(np.prod(shapes[name]))
        out[name] = vector[offset : offset + size].reshape(shapes[name]).astype(config.np_dtype())
        offset += size
    if offset != vector.size:
        raise ValidationError("parameter vector length does not match config")
    return out


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 same-padding convolution over the trailing (H, W, C) dims.

    Implemented as nine shifted matmuls; leading dims are batch.
    """
    h, wd = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(x, pad)
    out = np.broadcast_to(b, x.shape[:-1] + (w.shape[0],)).copy()
    for ky in range(3):
        for kx in range(3):
            window = xp[..., ky : ky + h, kx : kx + wd, :]
            out += window @ w[:, ky, kx, :].T
    return out


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, dout: np.ndarray, need_dx: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d` w.r.t. input, weight, and bias."""
    h, wd = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(x, pad)
    c_in, c_out = x.shape[-1], w.shape[0]
    dout_flat = dout.reshape(-1, c_out)
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp) if need_dx else None
    for ky in range(3):
        for kx in range(3):
            window = xp[..., ky : ky + h, kx : kx + wd, :]
            dw[:, ky, kx, :] = dout_flat.T @ window.reshape(-1, c_in)
            if need_dx:
                dxp[..., ky : ky + h, kx : kx + wd, :] += dout @ w[:, ky, kx, :]
    db = dout_flat.sum(axis=0)
    dx = dxp[..., 1 : 1 + h, 1 : 1 + wd, :] if need_dx else None
    return dx, dw, db


def build_input_features(config: NetConfig, x: np.ndarray) -> np.ndarray:
    """Concatenate fixed frame-position and spatial sinusoids to the input
    channels."""
    dtype = config.np_dtype()
    b, f, h, wd = x.shape[:4]
    parts = [x.astype(dtype, copy=False)]
    if config.frame_freqs:
        ff = _sin_features(_axis_positions(f, dtype), config.frame_freqs, dtype)
        parts.append(np.broadcast_to(ff[None, :, None, None, :], (b, f, h, wd, ff.shape[-1])))
    if config.spatial_freqs:
        fy = _sin_features(_axis_positions(h, dtype), config.spatial_freqs, dtype)
        fx = _sin_features(_axis_positions(wd, dtype), config.spatial_freqs, dtype)
        parts.append(np.broadcast_to(fy[None, None, :, None, :], (b, f, h, wd, fy.shape[-1])))
        parts.append(np.broadcast_to(fx[None, None, None, :, :], (b, f, h, wd, fx.shape[-1])))
    return np.concatenate(parts, axis=-1)


def build_condition(config: NetConfig, t: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Per-sample conditioning vector: sinusoidal time features plus the text
    embedding."""
    dtype = config.np_dtype()
    t = np.atleast_1d(np.asarray(t, dtype=dtype))
    c = np.asarray(c, dtype=dtype)
    if c.ndim == 1:
        c = np.broadcast_to(c, (t.shape[0], c.shape[0]))
    if c.shape[-1] != config.text_dim:
        raise ValidationError(
            f"text embedding dim {c.shape[-1]} does not match config text_dim {config.text_dim}"
        )
    tf = _sin_features(t, config.time_freqs, dtype)
    return np.concatenate([tf, c], axis=-1)


def _film(cond, gw, gb, bw, bb):
    gamma = cond @ gw.T + gb
    beta = cond @ bw.T + bb
    return gamma, beta


def forward(
    params: dict[str, np.ndarray],
    config: NetConfig,
    x: np.ndarray,
    t: np.ndarray,
    c: np.ndarray,
    want_cache: bool = False,
):
    """Predict velocities for a batch.

    ``x`` is (B, F, H, W, 3), ``t`` is (B,), ``c`` is (B, D) or (D,).
    Returns (B, F, H, W, 3), plus the cache of intermediates when requested.
    """
    if x.ndim != 5 or x.shape[-1] != 3:
        raise ValidationError(f"expected input of shape (B, F, H, W, 3), got {x.shape}")
    dtype = config.np_dtype()
    x = x.astype(dtype, copy=False)
    feats = build_input_features(config, x)
    cond = build_condition(config, t, c)

    z1 = conv2d(feats, params["conv1_w"], params["conv1_b"])
    g1, b1 = _film(cond, params["film1_gw"], params["film1_gb"], params["film1_bw"], params["film1_bb"])
    f1 = z1 * (1.0 + g1)[:, None, None, None, :] + b1[:, None, None, None, :]
    a1 = np.tanh(f1)

    z2 = conv2d(a1, params["conv2_w"], params["conv2_b"])
    g2, b2 = _film(cond, params["film2_gw"], params["film2_gb"], params["film2_bw"], params["film2_bb"])
    f2 = z2 * (1.0 + g2)[:, None, None, None, :] + b2[:, None, None, None, :]
    a2 = np.tanh(f2)

    h2 = a1 + a2

    # gated linear skip from the raw input: captures the component of the
    # velocity that is linear in x_t with a time/text dependent coefficient
    zs = x @ params["skip_w"].T
    gs = cond @ params["skip_gw"].T + params["skip_gb"]
    out = conv2d(h2, params["conv3_w"], params["conv3_b"]) + zs * (1.0 + gs)[:, None, None, None, :]
    if not want_cache:
        return out
    cache = {
        "x": x, "feats": feats, "cond": cond,
        "z1": z1, "g1": g1, "a1": a1,
        "z2": z2, "g2": g2, "a2": a2,
        "h2": h2, "zs": zs, "gs": gs,
    }
    return out, cache


def backward(
    params: dict[str, np.ndarray],
    config: NetConfig,
    cache: dict[str, np.ndarray],
    dout: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given d(loss)/d(out)."""
    cond = cache["cond"]
    grads: dict[str, np.ndarray] = {}

    gs = cache["gs"]
    dzs = dout * (1.0 + gs)[:, None, None, None, :]
    grads["skip_w"] = dzs.reshape(-1, 3).T @ cache["x"].reshape(-1, 3)
    dgs = np.einsum("bfhwc,bfhwc->bc", dout, cache["zs"])
    grads["skip_gw"] = dgs.T @ cond
    grads["skip_gb"] = dgs.sum(axis=0)

    dh2, grads["conv3_w"], grads["conv3_b"] = conv2d_backward(cache["h2"], params["conv3_w"], dout)

    # residual: h2 = a1 + a2
    da2 = dh2
    da1 = dh2.copy()

    df2 = da2 * (1.0 - cache["a2"] ** 2)
    g2 = cache["g2"]
    dz2 = df2 * (1.0 + g2)[:, None, None, None, :]
    dgamma2 = np.einsum("bfhwc,bfhwc->bc", df2, cache["z2"])
    dbeta2 = df2.sum(axis=(1, 2, 3))
    grads["film2_gw"] = dgamma2.T @ cond
    grads["film2_gb"] = dgamma2.sum(axis=0)
    grads["film2_bw"] = dbeta2.T @ cond
    grads["film2_bb"] = dbeta2.sum(axis=0)

    dx2, grads["conv2_w"], grads["conv2_b"] = conv2d_backward(cache["a1"], params["conv2_w"], dz2)
    da1 += dx2

    df1 = da1 * (1.0 - cache["a1"] ** 2)
    g1 = cache["g1"]
    dz1 = df1 * (1.0 + g1)[:, None, None, None, :]
    dgamma1 = np.einsum("bfhwc,bfhwc->bc", df1, cache["z1"])
    dbeta1 = df1.sum(axis=(1, 2, 3))
    grads["film1_gw"] = dgamma1.T @ cond
    grads["film1_gb"] = dgamma1.sum(axis=0)
    grads["film1_bw"] = dbeta1.T @ cond
    grads["film1_bb"] = dbeta1.sum(axis=0)

    _, grads["conv1_w"], grads["conv1_b"] = conv2d_backward(
        cache["feats"], params["conv1_w"], dz1, need_dx=False
    )
    return grads


@dataclass
class GeneratorParams:
    """Base weights of the velocity network plus the architecture descriptor."""

    config: NetConfig
    params: dict[str, np.ndarray]

    @classmethod
    def initialize(cls, config: NetConfig, seed: int) -> "GeneratorParams":
        return cls(config=config, params=init_params(config, seed))

    @property
    def parameter_count(self) -> int:
        return param_count(self.params)

    def copy(self) -> "GeneratorParams":
        return GeneratorParams(self.config, {k: v.copy() for k, v in self.params.items()})

    def velocity(self, x: np.ndarray, t, c: np.ndarray) -> np.ndarray:
        return forward(self.params, self.config, x, t, c)

    def save(self, path) -> Path:
        return save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "GeneratorParams":
        return load_checkpoint(path)


def save_checkpoint(model: GeneratorParams, path) -> Path:
    """Versioned binary blob: magic, JSON header (config + array manifest),
    then the raw parameter payload in layout order."""
    path = Path(path)
    header = {
        "version": 1,
        "config": asdict(model.config),
        "arrays": [
            {"name": name, "shape": list(model.params[name].shape), "dtype": str(model.params[name].dtype)}
            for name in PARAM_NAMES
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(len(header_bytes).to_bytes(8, "little"))
    buf.write(header_bytes)
    for name in PARAM_NAMES:
        buf.write(np.ascontiguousarray(model.params[name]).tobytes())
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> GeneratorParams:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint {path} does not exist")
    blob = path.read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ConfigurationError(f"{path} is not a generator checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    header_len = int.from_bytes(blob[offset : offset + 8], "little")
    offset += 8
    header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    if header["version"] != 1:
        raise ConfigurationError(f"unsupported checkpoint version {header['version']}")
    config = NetConfig(**header["config"])
    params: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        size = int(np.prod(entry["shape"])) * dtype.itemsize
        arr = np.frombuffer(blob[offset : offset + size], dtype=dtype).reshape(entry["shape"])
        params[entry["name"]] = arr.copy()
        offset += size
    return GeneratorParams(config=config, params=params)
