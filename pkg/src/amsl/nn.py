"""Dense NHWC layers with explicit forward/backward passes, Adam, and a gradient checker.

Each ``forward`` returns ``(output, cache)``; ``backward(cache, grad)`` returns the
input gradient and accumulates parameter gradients into ``Parameter.grad``.
Layers compute in the dtype of their parameters, so a float64 copy of any layer
can be finite-difference checked while training runs in float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class DimensionError(ValueError):
    pass


class CacheError(RuntimeError):
    """Backward called with a missing, foreign, or already consumed cache."""


class NumericalError(FloatingPointError):
    pass


class Parameter:
    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = value
        self.grad = np.zeros_like(value)
        self.adam_m = np.zeros_like(value)
        self.adam_v = np.zeros_like(value)
        self.step_count = 0
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def astype(self, dtype) -> None:
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.adam_m = self.adam_m.astype(dtype)
        self.adam_v = self.adam_v.astype(dtype)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


@dataclass
class Cache:
    owner: Any
    data: dict = field(default_factory=dict)
    used: bool = False


def _consume(layer, cache: Cache | None) -> dict:
    if cache is None:
        raise CacheError(f"{layer.name}: backward called without a forward cache")
    if cache.owner is not layer:
        raise CacheError(f"{layer.name}: cache belongs to {getattr(cache.owner, 'name', '?')}")
    if cache.used:
        raise CacheError(f"{layer.name}: stale cache (already consumed by backward)")
    cache.used = True
    return cache.data


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = "layer"
    name = ""

    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def _check_rank(self, x: np.ndarray, rank: int, what: str = "input"):
        if x.ndim != rank:
            raise DimensionError(
                f"{self.kind} layer {self.name!r}: expected rank-{rank} {what}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution helpers


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    b, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    # read-only strided view of every patch; the reshape makes the single copy
    patches = as_strided(xp, (b, ho, wo, kh, kw, c), (s0, s1 * sh, s2 * sw, s1, s2, s3), writeable=False)
    return patches.reshape(b * ho * wo, kh * kw * c)


def _col2im(cols: np.ndarray, out_shape, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int):
    b, _, _, c = out_shape
    out = np.zeros(out_shape, dtype=cols.dtype)
    cols = cols.reshape(b, ho, wo, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] += cols[:, :, :, i, j, :]
    return out


class Conv2D(Layer):
    """4x4 (or any k) convolution, NHWC, explicit per-side zero padding."""

    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel=(4, 4), stride=(1, 1),
                 padding=(0, 0, 0, 0), rng=None, dtype=np.float32, name="conv",
                 needs_input_grad=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        # False on a network's first layer: backward then skips dx and returns None
        self.needs_input_grad = needs_input_grad
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        self.in_ch, self.out_ch, self.name = in_ch, out_ch, name
        kh, kw = self.kernel
        self.weight = Parameter(
            glorot_uniform(rng, (kh, kw, in_ch, out_ch), kh * kw * in_ch, kh * kw * out_ch, dtype),
            f"{name}.weight")
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (pt, pb, pl, pr) = self.kernel, self.stride, self.padding
        return (h + pt + pb - kh) // sh + 1, (w + pl + pr - kw) // sw + 1

    def forward(self, x, train=False, rng=None):
        self._check_rank(x, 4)
        if x.shape[3] != self.in_ch:
            raise DimensionError(
                f"conv2d layer {self.name!r}: expected {self.in_ch} input channels, got shape {x.shape}")
        ho, wo = self.output_shape(x.shape[1], x.shape[2])
        if ho < 1 or wo < 1:
            raise DimensionError(f"conv2d layer {self.name!r}: input {x.shape} too small for kernel")
        pt, pb, pl, pr = self.padding
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if any(self.padding) else x
        kh, kw = self.kernel
        cols = _im2col(xp, kh, kw, *self.stride, ho, wo)
        w = self.weight.value.reshape(-1, self.out_ch)
        out = (cols @ w + self.bias.value).reshape(x.shape[0], ho, wo, self.out_ch)
        return out, Cache(self, {"cols": cols, "xp_shape": xp.shape, "x_shape": x.shape})

    def backward(self, cache, dout):
        c = _consume(self, cache)
        b, ho, wo, _ = dout.shape
        d2 = dout.reshape(-1, self.out_ch)
        self.weight.grad += (c["cols"].T @ d2).reshape(self.weight.shape)
        self.bias.grad += d2.sum(axis=0)
        if not self.needs_input_grad:
            return None
        dcols = d2 @ self.weight.value.reshape(-1, self.out_ch).T
        kh, kw = self.kernel
        dxp = _col2im(dcols, c["xp_shape"], kh, kw, *self.stride, ho, wo)
        pt, pb, pl, pr = self.padding
        h, w = c["x_shape"][1:3]
        return dxp[:, pt:pt + h, pl:pl + w, :]


class ConvTranspose2D(Layer):
    """Transposed convolution; the full output is cropped per side by ``crop``."""

    kind = "conv_transpose2d"

    def __init__(self, in_ch: int, out_ch: int, kernel=(4, 4), stride=(1, 1),
                 crop=(0, 0, 0, 0), rng=None, dtype=np.float32, name="deconv"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.crop = tuple(crop)
        self.in_ch, self.out_ch, self.name = in_ch, out_ch, name
        kh, kw = self.kernel
        self.weight = Parameter(
            glorot_uniform(rng, (in_ch, kh, kw, out_ch), kh * kw * out_ch, kh * kw * in_ch, dtype),
            f"{name}.weight")
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def full_shape(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw) = self.kernel, self.stride
        return (h - 1) * sh + kh, (w - 1) * sw + kw

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        fh, fw = self.full_shape(h, w)
        ct, cb, cl, cr = self.crop
        return fh - ct - cb, fw - cl - cr

    def forward(self, x, train=False, rng=None):
        self._check_rank(x, 4)
        if x.shape[3] != self.in_ch:
            raise DimensionError(
                f"conv_transpose2d layer {self.name!r}: expected {self.in_ch} input channels, "
                f"got shape {x.shape}")
        b, h, w, _ = x.shape
        fh, fw = self.full_shape(h, w)
        ho, wo = self.output_shape(h, w)
        if ho < 1 or wo < 1:
            raise DimensionError(f"conv_transpose2d layer {self.name!r}: crop exceeds output")
        (kh, kw), (sh, sw) = self.kernel, self.stride
        x2 = x.reshape(-1, self.in_ch)
        wv = self.weight.value
        # one matmul per kernel offset avoids materializing the full column matrix
        full = np.zeros((b, fh, fw, self.out_ch), dtype=np.result_type(x, wv))
        for i in range(kh):
            for j in range(kw):
                full[:, i:i + sh * (h - 1) + 1:sh, j:j + sw * (w - 1) + 1:sw, :] += \
                    (x2 @ wv[:, i, j, :]).reshape(b, h, w, self.out_ch)
        ct, _, cl, _ = self.crop
        out = full[:, ct:ct + ho, cl:cl + wo, :] + self.bias.value
        return out, Cache(self, {"x2": x2, "x_shape": x.shape, "full": (fh, fw)})

    def backward(self, cache, dout):
        c = _consume(self, cache)
        b, h, w, _ = c["x_shape"]
        fh, fw = c["full"]
        ct, cb, cl, cr = self.crop
        self.bias.grad += dout.sum(axis=(0, 1, 2))
        dfull = np.pad(dout, ((0, 0), (ct, cb), (cl, cr), (0, 0))) if any(self.crop) else dout
        kh, kw = self.kernel
        dcols = _im2col(dfull, kh, kw, *self.stride, h, w)
        wm = self.weight.value.reshape(self.in_ch, -1)
        self.weight.grad += (c["x2"].T @ dcols).reshape(self.weight.shape)
        return (dcols @ wm.T).reshape(b, h, w, self.in_ch)


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2; odd extents are padded with -inf (ceil mode)."""

    kind = "maxpool2x2"

    def __init__(self, name="pool"):
        self.name = name

    def forward(self, x, train=False, rng=None):
        self._check_rank(x, 4)
        b, h, w, c = x.shape
        ho, wo = -(-h // 2), -(-w // 2)
        if (h, w) != (2 * ho, 2 * wo):
            xp = np.full((b, 2 * ho, 2 * wo, c), -np.inf, dtype=x.dtype)
            xp[:, :h, :w, :] = x
        else:
            xp = x
        win = xp.reshape(b, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, ho, wo, c, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, Cache(self, {"idx": idx, "x_shape": x.shape})

    def backward(self, cache, dout):
        c = _consume(self, cache)
        b, h, w, ch = c["x_shape"]
        ho, wo = dout.shape[1:3]
        win = np.zeros((b, ho, wo, ch, 4), dtype=dout.dtype)
        np.put_along_axis(win, c["idx"][..., None], dout[..., None], axis=-1)
        dx = win.reshape(b, ho, wo, ch, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, 2 * ho, 2 * wo, ch)
        return dx[:, :h, :w, :]


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng=None, dtype=np.float32, name="dense"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out, self.name = n_in, n_out, name
        self.weight = Parameter(glorot_uniform(rng, (n_in, n_out), n_in, n_out, dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out, dtype=dtype), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False, rng=None):
        self._check_rank(x, 2)
        if x.shape[1] != self.n_in:
            raise DimensionError(
                f"dense layer {self.name!r}: expected (batch, {self.n_in}), got {x.shape}")
        return x @ self.weight.value + self.bias.value, Cache(self, {"x": x})

    def backward(self, cache, dout):
        x = _consume(self, cache)["x"]
        self.weight.grad += x.T @ dout
        self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.value.T


class BatchNorm(Layer):
    """Batch normalization over axis 0 of a (batch, features) input."""

    kind = "batchnorm"

    def __init__(self, n_features: int, momentum=0.99, eps=1e-3, dtype=np.float32, name="bn"):
        self.name, self.momentum, self.eps = name, momentum, eps
        self.gamma = Parameter(np.ones(n_features, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(n_features, dtype=dtype), f"{name}.beta")
        self.running_mean = np.zeros(n_features, dtype=dtype)
        self.running_var = np.ones(n_features, dtype=dtype)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def forward(self, x, train=False, rng=None):
        self._check_rank(x, 2)
        if train:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            m = self.momentum
            self.running_mean[...] = m * self.running_mean + (1 - m) * mean
            self.running_var[...] = m * self.running_var + (1 - m) * var
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        out = self.gamma.value * xhat + self.beta.value
        return out, Cache(self, {"xhat": xhat, "inv": inv, "train": train})

    def backward(self, cache, dout):
        c = _consume(self, cache)
        xhat, inv = c["xhat"], c["inv"]
        self.gamma.grad += (dout * xhat).sum(axis=0)
        self.beta.grad += dout.sum(axis=0)
        dxhat = dout * self.gamma.value
        if not c["train"]:
            return dxhat * inv
        n = dout.shape[0]
        return inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))


class Sigmoid(Layer):
    kind = "sigmoid"

    def __init__(self, name="sigmoid"):
        self.name = name

    def forward(self, x, train=False, rng=None):
        out = 0.5 * (1.0 + np.tanh(0.5 * x))
        return out, Cache(self, {"out": out})

    def backward(self, cache, dout):
        s = _consume(self, cache)["out"]
        return dout * s * (1 - s)


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name="relu"):
        self.name = name

    def forward(self, x, train=False, rng=None):
        mask = x > 0
        return x * mask, Cache(self, {"mask": mask})

    def backward(self, cache, dout):
        return dout * _consume(self, cache)["mask"]


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


class Softmax(Layer):
    kind = "softmax"

    def __init__(self, name="softmax"):
        self.name = name

    def forward(self, x, train=False, rng=None):
        p = softmax(x)
        return p, Cache(self, {"p": p})

    def backward(self, cache, dout):
        p = _consume(self, cache)["p"]
        return p * (dout - (dout * p).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows and its gradient w.r.t. the logits (probs - onehot)/n."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -float(logp[np.arange(n), labels].astype(np.float64).sum()) / n
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


class Dropout(Layer):
    """Inverted dropout; identity in eval mode."""

    kind = "dropout"

    def __init__(self, rate=0.5, name="dropout"):
        self.rate, self.name = rate, name

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0:
            return x, Cache(self, {"mask": None})
        if rng is None:
            raise ValueError(f"dropout layer {self.name!r} needs an rng in train mode")
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * mask, Cache(self, {"mask": mask})

    def backward(self, cache, dout):
        mask = _consume(self, cache)["mask"]
        return dout if mask is None else dout * mask


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, name="flatten"):
        self.name = name

    def forward(self, x, train=False, rng=None):
        return x.reshape(x.shape[0], -1), Cache(self, {"shape": x.shape})

    def backward(self, cache, dout):
        return dout.reshape(_consume(self, cache)["shape"])


class Concat(Layer):
    """Concatenation along the channel (last) axis; forward takes a sequence."""

    kind = "concat"

    def __init__(self, name="concat"):
        self.name = name

    def forward(self, xs: Sequence[np.ndarray], train=False, rng=None):
        lead = {x.shape[:-1] for x in xs}
        if len(lead) != 1:
            raise DimensionError(f"concat layer {self.name!r}: mismatched shapes {[x.shape for x in xs]}")
        sizes = [x.shape[-1] for x in xs]
        return np.concatenate(xs, axis=-1), Cache(self, {"sizes": sizes})

    def backward(self, cache, dout):
        sizes = _consume(self, cache)["sizes"]
        return np.split(dout, np.cumsum(sizes)[:-1], axis=-1)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers: Sequence[Layer], name="seq"):
        self.layers = list(layers)
        self.name = name

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def forward(self, x, train=False, rng=None):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, train=train, rng=rng)
            caches.append(c)
        return x, Cache(self, {"caches": caches})

    def backward(self, cache, dout):
        caches = _consume(self, cache)["caches"]
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dout = layer.backward(c, dout)
        return dout


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: Sequence[Parameter], lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in parameter {p.name!r}; step aborted")
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            p.step_count += 1
            t = p.step_count
            p.adam_m *= b1
            p.adam_m += (1 - b1) * p.grad
            p.adam_v *= b2
            p.adam_v += (1 - b2) * (p.grad * p.grad)
            m_hat = p.adam_m / (1 - b1 ** t)
            v_hat = p.adam_v / (1 - b2 ** t)
            p.value -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.value.dtype)
            p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    worst: str


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def grad_check(layer: Layer, input_shape, eps=1e-4, tol=1e-4, seed=0, train=False,
               n_inputs: int = 1) -> GradCheckResult:
    """Compare backward against central differences on ``sum(out * g)`` for random x, g.

    The layer's parameters must be float64. Dropout masks are reproduced by
    reseeding the forward rng on every evaluation.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    rng = np.random.default_rng(seed)
    shapes = [input_shape] * n_inputs if n_inputs > 1 else [input_shape]
    xs = [rng.standard_normal(s) for s in shapes]
    saved = {k: v.copy() for k, v in layer.buffers().items()}

    def run():
        for k, v in layer.buffers().items():
            v[...] = saved[k]
        arg = xs if n_inputs > 1 else xs[0]
        return layer.forward(arg, train=train, rng=np.random.default_rng(seed + 1))

    out, _ = run()
    g = rng.standard_normal(out.shape)

    def loss():
        return float((run()[0] * g).sum())

    for p in layer.parameters():
        p.zero_grad()
    _, cache = run()
    dx = layer.backward(cache, g)
    dxs = dx if n_inputs > 1 else [dx]
    pairs = [(f"input{i}", a, x) for i, (a, x) in enumerate(zip(dxs, xs)) if a is not None]
    pairs += [(p.name, p.grad.copy(), p.value) for p in layer.parameters()]
    worst, worst_name = 0.0, ""
    for name, analytic, target in pairs:
        num = numeric_grad(loss, target, eps)
        err = float(rel_error(analytic, num).max()) if num.size else 0.0
        if err > worst:
            worst, worst_name = err, name
    for p in layer.parameters():
        p.zero_grad()
    return GradCheckResult(worst < tol, worst, worst_name)
