"""Small trainable-layer kit with hand-written backward passes.

Tensors are plain numpy arrays in batch-first NHWC layout (or ``(N, F)`` for
vectors).  Each layer keeps its parameters in ``params`` and the matching
gradients in ``grads``; ``forward`` caches what ``backward`` needs, so a layer
instance must not be shared between threads while training.

Float32 is the working precision.  Passing ``dtype=np.float64`` when building
a layer gives the verification mode used by :func:`grad_check`.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, GradCheckError, NonFiniteError

BCE_EPS = 1e-7


def check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where}")
    return x


def he_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base class.  Subclasses fill ``params`` and implement the two passes."""

    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def __call__(self, x, train=False):
        return self.forward(x, train)


class Conv2D(Layer):
    """2-D convolution on NHWC input; weights are ``(k, k, c_in, c_out)``."""

    name = "conv2d"

    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.padding = kernel, stride, padding
        # first layers over frozen inputs can skip the input gradient
        self.input_grad = True
        fan_in = kernel * kernel * c_in
        self.params["weight"] = he_uniform(rng, (kernel, kernel, c_in, c_out), fan_in, dtype)
        self.params["bias"] = np.zeros(c_out, dtype=dtype)
        self.zero_grad()

    def output_shape(self, h, w):
        k, s, p = self.kernel, self.stride, self.padding
        if k > h + 2 * p or k > w + 2 * p:
            raise ConfigurationError(f"kernel {k} larger than padded input {h + 2 * p}x{w + 2 * p}")
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise ConfigurationError(f"conv2d expects (N, H, W, {self.c_in}), got {x.shape}")
        n, h, w, c = x.shape
        ho, wo = self.output_shape(h, w)
        k, s, p = self.kernel, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        # windows: (N, Ho', Wo', C, k, k) -> keep strided positions
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
        wmat = self.params["weight"].reshape(k * k * c, self.c_out)
        out = cols @ wmat + self.params["bias"]
        self._cache = (cols, xp.shape, (n, h, w, ho, wo))
        return check_finite(out.reshape(n, ho, wo, self.c_out), "conv2d forward")

    def backward(self, grad):
        cols, xp_shape, (n, h, w, ho, wo) = self._cache
        k, s, p = self.kernel, self.stride, self.padding
        g2 = grad.reshape(n * ho * wo, self.c_out)
        wmat = self.params["weight"].reshape(k * k * self.c_in, self.c_out)
        self.grads["weight"] += (cols.T @ g2).reshape(self.params["weight"].shape)
        self.grads["bias"] += g2.sum(axis=0)
        if not self.input_grad:
            return None
        dcols = (g2 @ wmat.T).reshape(n, ho, wo, k, k, self.c_in)
        dxp = np.zeros(xp_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, p:p + h, p:p + w, :] if p else dxp
        return check_finite(dx, "conv2d backward")


class Linear(Layer):
    """Fully connected layer, ``out = x @ W.T + b`` with ``W`` of shape (out, in)."""

    name = "linear"

    def __init__(self, n_in, n_out, rng=None, dtype=np.float32, init_scale=1.0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.params["weight"] = (he_uniform(rng, (n_out, n_in), n_in, dtype) * init_scale).astype(dtype)
        self.params["bias"] = np.zeros(n_out, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ConfigurationError(f"linear expects (N, {self.n_in}), got {x.shape}")
        self._x = x
        return check_finite(x @ self.params["weight"].T + self.params["bias"], "linear forward")

    def backward(self, grad):
        self.grads["weight"] += grad.T @ self._x
        self.grads["bias"] += grad.sum(axis=0)
        return check_finite(grad @ self.params["weight"], "linear backward")


class BatchNorm(Layer):
    """Per-channel batch normalisation over every axis but the last."""

    name = "batchnorm"

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=False):
        c = self.params["gamma"].shape[0]
        if x.shape[-1] != c:
            raise ConfigurationError(f"batchnorm expects {c} channels, got {x.shape}")
        axes = tuple(range(x.ndim - 1))
        if train:
            if x.shape[0] < 2:
                raise ConfigurationError("batchnorm needs a batch of at least 2 in train mode")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // c
            m_ = self.momentum
            self.buffers["running_mean"] = (m_ * self.buffers["running_mean"] + (1 - m_) * mean).astype(x.dtype)
            unbiased = var * m / max(m - 1, 1)
            self.buffers["running_var"] = (m_ * self.buffers["running_var"] + (1 - m_) * unbiased).astype(x.dtype)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, axes, train)
        return check_finite(xhat * self.params["gamma"] + self.params["beta"], "batchnorm forward")

    def backward(self, grad):
        xhat, inv_std, axes, train = self._cache
        gamma = self.params["gamma"]
        self.grads["gamma"] += (grad * xhat).sum(axis=axes)
        self.grads["beta"] += grad.sum(axis=axes)
        gx = grad * gamma
        if not train:
            return gx * inv_std
        m = grad.size // grad.shape[-1]
        dx = inv_std / m * (m * gx - gx.sum(axis=axes) - xhat * (gx * xhat).sum(axis=axes))
        return check_finite(dx, "batchnorm backward")


class ReLU(Layer):
    name = "relu"

    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return np.where(self._mask, grad, 0).astype(grad.dtype)


class Dropout(Layer):
    """Inverted dropout; identity in eval mode."""

    name = "dropout"

    def __init__(self, p=0.5, rng=None):
        super().__init__()
        if not 0 <= p < 1:
            raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x, train=False):
        if not train or self.p == 0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) >= self.p
        self._mask = keep.astype(x.dtype) / (1 - self.p)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class Flatten(Layer):
    name = "flatten"

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


def interp_matrix(n_in, n_out, dtype=np.float64):
    """Row ``o`` holds the corner-aligned bilinear weights for output ``o``."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


class UpsampleBilinear(Layer):
    """Corner-aligned bilinear resize of NHWC maps to ``(out_h, out_w)``."""

    name = "upsample"

    def __init__(self, out_h, out_w):
        super().__init__()
        self.out_h, self.out_w = out_h, out_w
        self._mats = {}

    def _matrices(self, h, w, dtype):
        key = (h, w, np.dtype(dtype).str)
        if key not in self._mats:
            if self.out_h < h or self.out_w < w:
                raise ConfigurationError(f"upsample target {self.out_h}x{self.out_w} smaller than {h}x{w}")
            self._mats[key] = (interp_matrix(h, self.out_h).astype(dtype),
                               interp_matrix(w, self.out_w).astype(dtype))
        return self._mats[key]

    def forward(self, x, train=False):
        ah, aw = self._matrices(x.shape[1], x.shape[2], x.dtype)
        n, h, w, c = x.shape
        self._in_hw = (h, w)
        t = np.matmul(ah, x.reshape(n, h, w * c)).reshape(n, self.out_h, w, c)
        return np.matmul(aw, t.reshape(n * self.out_h, w, c)).reshape(n, self.out_h, self.out_w, c)

    def backward(self, grad):
        h, w = self._in_hw
        ah, aw = self._matrices(h, w, grad.dtype)
        n, c = grad.shape[0], grad.shape[3]
        t = np.matmul(aw.T, grad.reshape(n * self.out_h, self.out_w, c)).reshape(n, self.out_h, w * c)
        return np.matmul(ah.T, t).reshape(n, h, w, c)


def upsample_bilinear(x, out_h, out_w):
    """Resize one ``(H, W, C)`` map or an NHWC batch."""
    single = x.ndim == 3
    out = UpsampleBilinear(out_h, out_w).forward(x[None] if single else x)
    return out[0] if single else out


def relu(x):
    return np.maximum(x, 0)


def dropout(x, p, seed, train=True):
    return Dropout(p, np.random.default_rng(seed)).forward(x, train)


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(np.result_type(x, np.float32))


def cross_entropy(logits, target):
    """Mean ``-log softmax(logits)[target]`` and its gradient w.r.t. the logits.

    Accepts a single logit vector with an int target, or ``(N, K)`` logits with
    ``N`` targets.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    lg = logits[None] if single else logits
    tg = np.atleast_1d(np.asarray(target))
    k = lg.shape[1]
    if tg.shape[0] != lg.shape[0]:
        raise ConfigurationError("one target per logit row required")
    if np.any(tg < 0) or np.any(tg >= k):
        raise ConfigurationError(f"target out of range for {k} classes: {tg}")
    lsm = log_softmax(lg.astype(np.float64))
    n = lg.shape[0]
    loss = -lsm[np.arange(n), tg].mean()
    grad = np.exp(lsm)
    grad[np.arange(n), tg] -= 1.0
    grad /= n
    grad = grad.astype(lg.dtype)
    return float(loss), (grad[0] if single else grad)


def bce(prediction, target):
    """Binary cross entropy averaged over the batch, predictions clamped to [eps, 1-eps]."""
    y = np.clip(np.asarray(prediction, dtype=np.float64), BCE_EPS, 1 - BCE_EPS)
    t = np.asarray(target, dtype=np.float64)
    return float(-np.mean(t * np.log(y) + (1 - t) * np.log(1 - y)))


def bce_grad(prediction, target):
    """Gradient of :func:`bce` w.r.t. the (clamped) predictions."""
    y = np.clip(np.asarray(prediction, dtype=np.float64), BCE_EPS, 1 - BCE_EPS)
    t = np.asarray(target, dtype=np.float64)
    return (y - t) / (y * (1 - y)) / y.size


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    lr_step_epochs: int = 3
    lr_decay_factor: float = 0.1
    max_epochs: int = 10
    early_stop_patience: int = 3
    batch_size: int = 32
    dropout_p: float = 0.5
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0 <= self.dropout_p < 1:
            raise ConfigurationError("dropout_p must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr_step_epochs < 1:
            raise ConfigurationError("lr_step_epochs must be >= 1")
        if self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigurationError("max_epochs and early_stop_patience must be >= 1")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigurationError("lr_decay_factor must be in (0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must fit in an unsigned 64-bit integer")


def effective_lr(config, epoch):
    return config.learning_rate * config.lr_decay_factor ** (epoch // config.lr_step_epochs)


class SGD:
    """Momentum SGD over a list of layers with a step-decay schedule."""

    def __init__(self, layers, config):
        self.layers = list(layers)
        self.config = config
        self.velocity = {}

    def step(self, epoch):
        lr = effective_lr(self.config, epoch)
        mu = self.config.momentum
        for li, layer in enumerate(self.layers):
            for k, p in layer.params.items():
                g = layer.grads[k]
                if mu:
                    v = self.velocity.get((li, k))
                    v = g.copy() if v is None else mu * v + g
                    self.velocity[(li, k)] = v
                    g = v
                p -= (lr * g).astype(p.dtype)
        return lr

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()


def sgd_step(layers, config, epoch, optimizer=None):
    """One update of ``layers`` in place; pass a persistent ``optimizer`` to keep momentum."""
    opt = optimizer if optimizer is not None else SGD(layers, config)
    return opt.step(epoch)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple = ()
    per_tensor: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def _rel_error(analytic, numeric, floor):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(layer, x, tolerance=1e-4, train=True, h=1e-6, seed=0, floor=1e-6, max_coords=200):
    """Compare ``layer.backward`` against central differences.

    The scalar objective is ``sum(forward(x) * r)`` for a fixed random ``r``.
    Each evaluation runs on a deep copy of the layer, so dropout masks and
    batch-norm running statistics are identical across evaluations.  The
    relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; at most
    ``max_coords`` randomly chosen coordinates per tensor are probed.

    Raises :class:`GradCheckError` naming the worst coordinate when the
    maximum relative error reaches ``tolerance``.
    """
    if x.dtype != np.float64 or any(p.dtype != np.float64 for p in layer.params.values()):
        raise ConfigurationError("grad_check needs 64-bit input and parameters")
    rng = np.random.default_rng(seed)
    base = copy.deepcopy(layer)
    probe = copy.deepcopy(base)
    out = probe.forward(x, train)
    r = rng.standard_normal(out.shape)
    probe.zero_grad()
    gx = probe.backward(r)
    analytic = {} if gx is None else {"input": gx}
    analytic.update({f"param:{k}": probe.grads[k] for k in probe.params})

    def objective(xx, lay):
        return float(np.sum(copy.deepcopy(lay).forward(xx, train) * r))

    report = GradCheckReport(0.0, (), {}, tolerance)
    targets = [("input", x)] if gx is not None else []
    targets += [(f"param:{k}", base.params[k]) for k in base.params]
    for name, arr in targets:
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        a_flat = analytic[name].reshape(-1)
        worst_here = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = objective(x, base)
            flat[i] = old - h
            fm = objective(x, base)
            flat[i] = old
            num = (fp - fm) / (2 * h)
            err = float(_rel_error(a_flat[i], num, floor))
            worst_here = max(worst_here, err)
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = (name, int(i), float(a_flat[i]), float(num))
        report.per_tensor[name] = worst_here
    if not report.passed:
        name, i, a, n = report.worst
        raise GradCheckError(
            f"gradient check failed for {layer.name}: {name}[{i}] analytic={a:.6g} "
            f"numeric={n:.6g} rel={report.max_rel_error:.3g} >= {tolerance}", report)
    return report


class Sequential(Layer):
    """Chain of layers; parameters are namespaced ``<index>.<param>``."""

    name = "sequential"

    def __init__(self, layers):
        # no Layer.__init__: params/grads/buffers are views over the children
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def _collect(self, attr):
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in getattr(l, attr).items()}

    @property
    def params(self):
        return self._collect("params")

    @property
    def grads(self):
        return self._collect("grads")

    @property
    def buffers(self):
        return self._collect("buffers")
