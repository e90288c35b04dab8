"""Low-rank adapters for the generator's linear maps.

Each adapted weight W0 (any array viewed as a (d, k) matrix, with conv kernels
flattened over their receptive field) gets a trainable delta (alpha/r) * B @ A
with A of shape (r, k) and B of shape (d, r). B starts at zero so a fresh
injection never changes any output; the base weights are never modified in
place and are the frozen set during tuning.
"""

from __future__ import annotations

import fnmatch
import io
import json
from dataclasses import dataclass

from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ValidationError
from .velocity_net import WEIGHT_NAMES, GeneratorParams, forward

ADAPTER_MAGIC = b"FLORA1\n"


@dataclass
class LoraLayer:
    """Low-rank delta attached to one frozen base weight."""

    A: np.ndarray
    B: np.ndarray
    rank: int
    alpha: float
    base_ref: str = ""

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def validate(self) -> "LoraLayer":
        d, k = self.B.shape[0], self.A.shape[1]
        if self.rank < 1:
            raise ValidationError("lora rank must be >= 1")
        if self.rank > min(d, k):
            raise ValidationError(f"lora rank {self.rank} exceeds min(d, k) = {min(d, k)}")
        if self.A.shape != (self.rank, k) or self.B.shape != (d, self.rank):
            raise ValidationError("lora factor shapes are inconsistent with the rank")
        return self

    def delta(self) -> np.ndarray:
        return self.scale * (self.B @ self.A)

    def trainable_count(self) -> int:
        return self.A.size + self.B.size


def init_lora(d: int, k: int, r: int, alpha: float, seed: int, base_ref: str = "",
              init_scale: float = 1.0, dtype=np.float32) -> LoraLayer:
    """A gets a small Gaussian (std init_scale / sqrt(r)), B starts at zero,
    so the initial delta is exactly zero."""
    if r < 1 or r > min(d, k):
        raise ValidationError(f"rank {r} out of range for a {d}x{k} weight")
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, init_scale / np.sqrt(r), size=(r, k)).astype(dtype)
    b = np.zeros((d, r), dtype=dtype)
    return LoraLayer(A=a, B=b, rank=r, alpha=alpha, base_ref=base_ref).validate()


def lora_forward(layer: LoraLayer, w0: np.ndarray, x: np.ndarray) -> np.ndarray:
    """W0 x plus the scaled low-rank correction; with alpha == r the scale is 1."""
    layer.validate()
    if w0.shape != (layer.B.shape[0], layer.A.shape[1]):
        raise ValidationError(f"base weight shape {w0.shape} does not match the adapter")
    return w0 @ x + layer.scale * (layer.B @ (layer.A @ x))


def merge(layer: LoraLayer, w0: np.ndarray) -> np.ndarray:
    """Fold the adapter into the base weight: W0 + (alpha/r) B A."""
    layer.validate()
    if w0.shape != (layer.B.shape[0], layer.A.shape[1]):
        raise ValidationError(f"base weight shape {w0.shape} does not match the adapter")
    return w0 + layer.delta().astype(w0.dtype)


def _matrix_shape(shape: tuple[int, ...]) -> tuple[int, int]:
    return shape[0], int(np.prod(shape[1:]))


@dataclass
class AdaptedParams:
    """Frozen base generator plus trainable adapters on selected weights."""

    base: GeneratorParams
    layers: dict[str, LoraLayer]

    def validate(self) -> "AdaptedParams":
        for name, layer in self.layers.items():
            if name not in self.base.params:
                raise ValidationError(f"adapter targets unknown weight {name!r}")
            layer.validate()
            if _matrix_shape(self.base.params[name].shape) != (layer.B.shape[0], layer.A.shape[1]):
                raise ValidationError(f"adapter for {name!r} does not match the base weight shape")
        return self

    @property
    def config(self):
        return self.base.config

    @property
    def trainable_count(self) -> int:
        return sum(layer.trainable_count() for layer in self.layers.values())

    def effective_params(self) -> dict[str, np.ndarray]:
        """Base weights with every adapter delta folded in (bases untouched)."""
        params = dict(self.base.params)
        for name, layer in self.layers.items():
            w0 = self.base.params[name]
            params[name] = (w0.reshape(_matrix_shape(w0.shape)) + layer.delta().astype(w0.dtype)).reshape(w0.shape)
        return params

    def velocity(self, x: np.ndarray, t, c: np.ndarray) -> np.ndarray:
        return forward(self.effective_params(), self.base.config, x, t, c)

    def adapter_grads(self, weight_grads: dict[str, np.ndarray]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Map d(loss)/d(effective weight) onto (dA, dB) for each adapter.

        With W_eff = W0 + s * B A: dA = s * B^T dW, dB = s * dW A^T.
        """
        out: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for name, layer in self.layers.items():
            dw = weight_grads[name].reshape(_matrix_shape(weight_grads[name].shape))
            out[name] = (layer.scale * layer.B.T @ dw, layer.scale * dw @ layer.A.T)
        return out

    def copy(self) -> "AdaptedParams":
        return AdaptedParams(
            base=self.base,
            layers={
                name: LoraLayer(layer.A.copy(), layer.B.copy(), layer.rank, layer.alpha, layer.base_ref)
                for name, layer in self.layers.items()
            },
        )

    def merge_into_base(self) -> GeneratorParams:
        """Export a plain generator with all deltas folded in."""
        return GeneratorParams(self.base.config, {k: v.copy() for k, v in self.effective_params().items()})

    def save(self, path) -> Path:
        return save_adapters(self, path)


def inject(params: GeneratorParams, targets, r: int, alpha: float, seed: int,
           init_scale: float = 1.0) -> AdaptedParams:
    """Attach adapters to every weight matrix matched by ``targets``.

    ``targets`` is a glob pattern or list of patterns over weight names
    ("*" adapts every linear map). The adapter set is the only trainable
    state; matching no layer is an error. A layer whose matrix is smaller
    than the requested rank gets its rank clipped to min(d, k), with the
    alpha/rank scale preserved.
    """
    if r < 1:
        raise ValidationError("lora rank must be >= 1")
    if isinstance(targets, str):
        targets = [targets]
    matched = sorted(
        name for name in WEIGHT_NAMES
        if any(fnmatch.fnmatch(name, pattern) for pattern in targets)
    )
    if not matched:
        raise ValidationError(f"selector {targets!r} matched no weight; available: {WEIGHT_NAMES}")
    seeds = np.random.SeedSequence(seed).spawn(len(matched))
    scale = alpha / r
    layers: dict[str, LoraLayer] = {}
    for name, child in zip(matched, seeds):
        d, k = _matrix_shape(params.params[name].shape)
        r_eff = min(r, d, k)
        layer_seed = int(child.generate_state(1)[0])
        layers[name] = init_lora(
            d, k, r_eff, alpha=scale * r_eff, seed=layer_seed, base_ref=name,
            init_scale=init_scale, dtype=params.params[name].dtype,
        )
    return AdaptedParams(base=params, layers=layers).validate()


def save_adapters(adapted: AdaptedParams, path) -> Path:
    """Adapter-only checkpoint: JSON header plus the A/B payloads."""
    path = Path(path)
    names = sorted(adapted.layers)
    header = {
        "version": 1,
        "layers": [
            {
                "name": name,
                "rank": adapted.layers[name].rank,
                "alpha": adapted.layers[name].alpha,
                "a_shape": list(adapted.layers[name].A.shape),
                "b_shape": list(adapted.layers[name].B.shape),
                "dtype": str(adapted.layers[name].A.dtype),
            }
            for name in names
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(ADAPTER_MAGIC)
    buf.write(len(header_bytes).to_bytes(8, "little"))
    buf.write(header_bytes)
    for name in names:
        buf.write(np.ascontiguousarray(adapted.layers[name].A).tobytes())
        buf.write(np.ascontiguousarray(adapted.layers[name].B).tobytes())
    path.write_bytes(buf.getvalue())
    return path


def load_adapters(path, base: GeneratorParams) -> AdaptedParams:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"adapter checkpoint {path} does not exist")
    blob = path.read_bytes()
    if not blob.startswith(ADAPTER_MAGIC):
        raise ConfigurationError(f"{path} is not an adapter checkpoint")
    offset = len(ADAPTER_MAGIC)
    header_len = int.from_bytes(blob[offset : offset + 8], "little")
    offset += 8
    header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    layers: dict[str, LoraLayer] = {}
    for entry in header["layers"]:
        dtype = np.dtype(entry["dtype"])
        a_size = int(np.prod(entry["a_shape"])) * dtype.itemsize
        b_size = int(np.prod(entry["b_shape"])) * dtype.itemsize
        a = np.frombuffer(blob[offset : offset + a_size], dtype=dtype).reshape(entry["a_shape"]).copy()
        offset += a_size
        b = np.frombuffer(blob[offset : offset + b_size], dtype=dtype).reshape(entry["b_shape"]).copy()
        offset += b_size
        layers[entry["name"]] = LoraLayer(
            A=a, B=b, rank=entry["rank"], alpha=entry["alpha"], base_ref=entry["name"]
        )
    return AdaptedParams(base=base, layers=layers).validate()
