import numpy as np
import pytest

from framechain.errors import ConfigurationError
from framechain.flow import TrainExample, encode_text, fm_loss_and_grad
from framechain.velocity_net import (
    GeneratorParams,
    NetConfig,
    conv2d,
    flatten_params,
    forward,
    init_params,
    load_checkpoint,
    param_count,
    save_checkpoint,
    unflatten_params,
)

TINY = NetConfig(channels=2, text_dim=3, time_freqs=1, frame_freqs=0,
                 spatial_freqs=0, dtype="float64")
# smallest full-featured instance, used for exhaustive finite-difference sweeps
GRADCHECK = NetConfig(channels=1, text_dim=3, time_freqs=1, frame_freqs=0,
                      spatial_freqs=0, dtype="float64")


def conv2d_reference(x, w, b):
    """Direct quadruple-loop 3x3 same-padding convolution (independent oracle)."""
    h, wd, c_in = x.shape
    c_out = w.shape[0]
    out = np.zeros((h, wd, c_out))
    for y in range(h):
        for xx in range(wd):
            for o in range(c_out):
                acc = b[o]
                for ky in range(3):
                    for kx in range(3):
                        sy, sx = y + ky - 1, xx + kx - 1
                        if 0 <= sy < h and 0 <= sx < wd:
                            acc += np.dot(w[o, ky, kx], x[sy, sx])
                out[y, xx, o] = acc
    return out


class TestConv:
    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(6, 5, 4))
        w = rng.normal(size=(3, 3, 3, 4))
        b = rng.normal(size=3)
        fast = conv2d(x[None, None], w, b)[0, 0]
        assert np.allclose(fast, conv2d_reference(x, w, b), atol=1e-12)


class TestForward:
    def test_output_shape(self):
        config = NetConfig(channels=4, text_dim=8, dtype="float64")
        model = GeneratorParams.initialize(config, 0)
        x = np.random.default_rng(1).normal(size=(2, 3, 8, 8, 3))
        out = forward(model.params, config, x, np.array([0.3, 0.7]),
                      np.zeros((2, 8)))
        assert out.shape == x.shape

    def test_deterministic_init(self):
        a = init_params(TINY, 7)
        b = init_params(TINY, 7)
        for name in a:
            assert np.array_equal(a[name], b[name])

    def test_flatten_round_trip(self):
        params = init_params(TINY, 3)
        vec = flatten_params(params)
        back = unflatten_params(vec, TINY)
        for name in params:
            assert np.array_equal(params[name], back[name])

    def test_gradcheck_config_param_budget(self):
        assert param_count(init_params(GRADCHECK, 0)) <= 200


def numerical_gradient(f, x, h=1e-6):
    grad = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2 * h)
    return grad


class TestGradients:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_analytic_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        model = GeneratorParams.initialize(TINY, seed)
        x1 = rng.normal(size=(2, 5, 5, 3))
        x0 = rng.normal(size=x1.shape)
        c = encode_text("small test clip", dim=TINY.text_dim).vector
        examples = [TrainExample(x1=x1, c=c, x0=x0, t=float(rng.uniform(0.1, 0.9)))]

        loss, grads = fm_loss_and_grad(model, examples)
        analytic = np.concatenate([grads[n].ravel() for n in sorted(grads)])

        names = sorted(grads)

        def loss_of(vec):
            params = {}
            offset = 0
            base = {k: v.copy() for k, v in model.params.items()}
            for name in names:
                size = base[name].size
                base[name] = vec[offset:offset + size].reshape(base[name].shape)
                offset += size
            trial = GeneratorParams(TINY, base)
            l, _ = fm_loss_and_grad(trial, examples)
            return l

        theta = np.concatenate([model.params[n].ravel() for n in names])
        numeric = numerical_gradient(loss_of, theta, h=1e-6)
        scale = max(np.abs(analytic).max(), 1e-8)
        assert np.abs(analytic - numeric).max() / scale < 1e-6


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = GeneratorParams.initialize(NetConfig(channels=3, text_dim=5), 1)
        path = save_checkpoint(model, tmp_path / "base.ckpt")
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        for name in model.params:
            assert np.array_equal(loaded.params[name], model.params[name])

    def test_byte_deterministic(self, tmp_path):
        model = GeneratorParams.initialize(NetConfig(channels=3, text_dim=5), 1)
        a = save_checkpoint(model, tmp_path / "a.ckpt").read_bytes()
        b = save_checkpoint(model, tmp_path / "b.ckpt").read_bytes()
        assert a == b

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_checkpoint(tmp_path / "nope.ckpt")
