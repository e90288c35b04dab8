"""Flow-matching primitives and training/sampling loops for the toy generator.

The generator learns a velocity field: for data x1, noise x0 ~ N(0, I), and a
logit-normal time t, the noised state is the linear interpolation
x_t = t*x1 + (1-t)*x0 and the regression target is the constant path velocity
x1 - x0. Sampling integrates the learned field from noise with fixed-step
Euler. Every training path (pre-training and sparse tuning alike) goes through
``interpolate`` and ``target_velocity`` here; there is no second code path.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError, ValidationError
from .lora import AdaptedParams
from .velocity_net import GeneratorParams, backward, forward


@dataclass
class VideoTensor:
    """Real-valued clip of shape (1+T, H, W, C); values nominally in [-1, 1].

    T = 0 is a single image treated as a one-frame video.
    """

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ValidationError(f"video tensor must be (1+T, H, W, C), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("video tensor must be finite")

    @property
    def T(self) -> int:
        return self.data.shape[0] - 1


@dataclass
class TextEmbedding:
    """Deterministic caption embedding."""

    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector)
        if self.vector.ndim != 1 or not np.all(np.isfinite(self.vector)):
            raise ValidationError("text embedding must be a finite 1-D vector")


def encode_text(caption: str, dim: int = 64) -> TextEmbedding:
    """Hash-bucket bag-of-tokens embedding, L2-normalized.

    Tokenization is lowercase whitespace split; the bucket of each token comes
    from a keyed blake2b digest, so the embedding is stable across processes
    and platforms and insensitive to token order.
    """
    tokens = caption.lower().split()
    if not tokens:
        raise ValidationError("caption must be non-empty")
    vec = np.zeros(dim, dtype=np.float64)
    for token in tokens:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        vec[int.from_bytes(digest, "little") % dim] += 1.0
    return TextEmbedding(vec / np.linalg.norm(vec))


def _as_array(x) -> np.ndarray:
    if isinstance(x, VideoTensor):
        return x.data
    if isinstance(x, TextEmbedding):
        return x.vector
    return np.asarray(x)


def interpolate(x0, x1, t) -> np.ndarray:
    """Linear interpolation t*x1 + (1-t)*x0.

    ``t`` may be a scalar or an array broadcast over leading batch dims.
    """
    x0, x1 = _as_array(x0), _as_array(x1)
    if x0.shape != x1.shape:
        raise ValidationError(f"interpolate shapes differ: {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=x0.dtype)
    if t.min() < 0.0 or t.max() > 1.0:
        raise ValidationError("interpolation time must lie in [0, 1]")
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    return t * x1 + (1.0 - t) * x0


def target_velocity(x0, x1) -> np.ndarray:
    """Constant velocity of the linear path: x1 - x0."""
    x0, x1 = _as_array(x0), _as_array(x1)
    if x0.shape != x1.shape:
        raise ValidationError(f"velocity shapes differ: {x0.shape} vs {x1.shape}")
    return x1 - x0


def sample_timestep(rng: np.random.Generator) -> float:
    """One logit-normal draw: sigmoid of a standard normal."""
    return float(1.0 / (1.0 + np.exp(-rng.standard_normal())))


def sample_timesteps(rng: np.random.Generator, n: int) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-rng.standard_normal(n)))


@dataclass
class TrainExample:
    """One supervised draw: clip x1 with caption embedding c, noise x0, time t."""

    x1: np.ndarray
    c: np.ndarray
    x0: np.ndarray
    t: float


def _model_parts(model):
    if isinstance(model, AdaptedParams):
        return model.effective_params(), model.config, model
    if isinstance(model, GeneratorParams):
        return model.params, model.config, None
    raise ValidationError(f"expected GeneratorParams or AdaptedParams, got {type(model)!r}")


def fm_loss(model, x1, c, draws) -> float:
    """Mean squared velocity-prediction error over a batch of (x0, t) draws
    for one clip/caption, averaged over batch and elements."""
    x1 = _as_array(x1)
    c = _as_array(c)
    params, config, _ = _model_parts(model)
    x0s = np.stack([_as_array(x0) for x0, _ in draws])
    ts = np.asarray([t for _, t in draws], dtype=np.float64)
    x1s = np.broadcast_to(x1, x0s.shape)
    xts = interpolate(x0s, x1s, ts)
    v = target_velocity(x0s, x1s)
    pred = forward(params, config, xts, ts, c)
    if not np.all(np.isfinite(pred)):
        raise NumericsError("velocity network produced non-finite predictions")
    return float(np.mean((pred - v) ** 2))


def fm_loss_and_grad(model, examples: list[TrainExample]):
    """Loss plus gradients w.r.t. the trainable set.

    Examples are grouped by clip shape and batched; the loss is the mean over
    examples of each example's per-element mean, so every example carries
    equal weight regardless of frame count.
    """
    if not examples:
        raise ValidationError("loss requires at least one example")
    params, config, adapted = _model_parts(model)
    n = len(examples)
    groups: dict[tuple, list[TrainExample]] = {}
    for ex in examples:
        groups.setdefault(tuple(_as_array(ex.x1).shape), []).append(ex)

    total_loss = 0.0
    grads: dict[str, np.ndarray] | None = None
    for group in groups.values():
        x1s = np.stack([_as_array(ex.x1) for ex in group])
        x0s = np.stack([_as_array(ex.x0) for ex in group])
        cs = np.stack([_as_array(ex.c) for ex in group])
        ts = np.asarray([ex.t for ex in group], dtype=np.float64)
        xts = interpolate(x0s, x1s, ts)
        v = target_velocity(x0s, x1s)
        pred, cache = forward(params, config, xts, ts, cs, want_cache=True)
        resid = pred - v
        if not np.all(np.isfinite(resid)):
            raise NumericsError("velocity network produced non-finite predictions")
        numel = int(np.prod(resid.shape[1:]))
        total_loss += float(np.sum(resid**2)) / numel / n
        dout = (2.0 / (numel * n)) * resid.astype(pred.dtype)
        g = backward(params, config, cache, dout)
        if grads is None:
            grads = g
        else:
            for name in grads:
                grads[name] += g[name]

    if adapted is not None:
        adapter_grads = adapted.adapter_grads({name: grads[name] for name in adapted.layers})
        flat = {}
        for name, (da, db) in adapter_grads.items():
            flat[name + ".A"] = da
            flat[name + ".B"] = db
        return total_loss, flat
    return total_loss, grads


def trainable_values(model) -> dict[str, np.ndarray]:
    """The trainable parameter set: base weights for a plain generator,
    adapter factors only for an adapted one."""
    if isinstance(model, AdaptedParams):
        values = {}
        for name, layer in model.layers.items():
            values[name + ".A"] = layer.A
            values[name + ".B"] = layer.B
        return values
    return model.params


def apply_values(model, values: dict[str, np.ndarray]):
    """Functional update: returns a new model with the trainable set replaced."""
    if isinstance(model, AdaptedParams):
        new = model.copy()
        for name, layer in new.layers.items():
            layer.A = values[name + ".A"]
            layer.B = values[name + ".B"]
        return new
    return GeneratorParams(model.config, dict(values))


@dataclass
class AdamState:
    """First/second moment accumulators for the optional adaptive optimizer."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def train_step(model, batch: list[TrainExample], lr: float, optimizer: str = "sgd",
               state: AdamState | None = None):
    """One gradient step on the flow-matching loss over ``batch``.

    Plain SGD by default; pass optimizer="adam" (with a persistent state) for
    the adaptive variant. Non-finite gradients abort the step. Returns
    (updated model, loss) and, when adam is used, the updated state.
    """
    if lr < 0:
        raise ValidationError("learning rate must be >= 0")
    loss, grads = fm_loss_and_grad(model, batch)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name!r}; step aborted")
    values = trainable_values(model)
    if optimizer == "sgd":
        new_values = {name: values[name] - lr * grads[name].astype(values[name].dtype)
                      for name in values}
        return apply_values(model, new_values), loss
    if optimizer == "adam":
        if state is None:
            state = AdamState()
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        state.step += 1
        new_values = {}
        for name in values:
            g = grads[name].astype(np.float64)
            m = state.m.get(name, np.zeros_like(g))
            v = state.v.get(name, np.zeros_like(g))
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            state.m[name], state.v[name] = m, v
            m_hat = m / (1 - beta1**state.step)
            v_hat = v / (1 - beta2**state.step)
            step = lr * m_hat / (np.sqrt(v_hat) + eps)
            new_values[name] = (values[name].astype(np.float64) - step).astype(values[name].dtype)
        return apply_values(model, new_values), loss, state
    raise ValidationError(f"unknown optimizer {optimizer!r}")


def train_loop(model, make_batch, steps: int, lr: float, optimizer: str = "sgd",
               on_step=None):
    """Run ``steps`` gradient steps; ``make_batch(step)`` supplies examples.

    Returns the final model and the per-step loss curve. A non-finite loss
    aborts immediately with the last good model.
    """
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    state = AdamState() if optimizer == "adam" else None
    losses: list[float] = []
    for step in range(steps):
        batch = make_batch(step)
        if optimizer == "adam":
            model, loss, state = train_step(model, batch, lr, optimizer="adam", state=state)
        else:
            model, loss = train_step(model, batch, lr)
        if not np.isfinite(loss):
            raise NumericsError(f"loss diverged at step {step}")
        losses.append(loss)
        if on_step is not None:
            on_step(step, loss)
    return model, losses


def euler_sample(model, c, shape, steps: int, seed: int) -> VideoTensor:
    """Integrate the learned velocity field from Gaussian noise.

    x starts at N(0, I) and takes ``steps`` Euler steps of size 1/steps with
    t = 0, 1/steps, .... The output is returned unclamped; exporters clamp to
    [-1, 1].
    """
    if steps < 1:
        raise ValidationError("euler_sample requires steps >= 1")
    if len(shape) == 3:
        shape = tuple(shape) + (3,)
    if len(shape) != 4 or shape[-1] != 3:
        raise ValidationError(f"sample shape must be (1+T, H, W[, 3]), got {shape}")
    params, config, _ = _model_parts(model)
    c = _as_array(c)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(config.np_dtype())
    dt = 1.0 / steps
    for k in range(steps):
        t = np.asarray([k * dt])
        u = forward(params, config, x[None], t, c[None] if c.ndim == 1 else c)
        x = x + dt * u[0]
        if not np.all(np.isfinite(x)):
            raise NumericsError(f"sampler state became non-finite at step {k}")
    return VideoTensor(x.astype(np.float64))
