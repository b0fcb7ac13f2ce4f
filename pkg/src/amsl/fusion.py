"""Input-independent gate weighting global vs. local memory reads."""

from __future__ import annotations

import numpy as np

from .nn import BatchNorm, Cache, Dense, DimensionError, Parameter, Sigmoid, _consume


class FusionGate:
    """alpha = sigmoid(batchnorm(dense(r))), a 2R-vector laid out [alpha_g(0..R-1), alpha_l(0..R-1)].

    The batch norm treats the 2R dense outputs as one feature observed 2R times.
    """

    name = "gate"

    def __init__(self, n_variants: int, rng: np.random.Generator, dtype=np.float32, r_init=1.0):
        self.n_variants = n_variants
        self.r = Parameter(np.full((1, 1), r_init, dtype=dtype), "gate.r")
        self.dense = Dense(1, 2 * n_variants, rng=rng, dtype=dtype, name="gate.dense")
        self.bn = BatchNorm(1, dtype=dtype, name="gate.bn")
        self.sigmoid = Sigmoid("gate.sigmoid")

    def parameters(self):
        return [self.r, *self.dense.parameters(), *self.bn.parameters()]

    def buffers(self):
        return self.bn.buffers()

    def forward(self, train=False):
        a, c1 = self.dense.forward(self.r.value, train)
        b, c2 = self.bn.forward(a.reshape(-1, 1), train)
        alpha, c3 = self.sigmoid.forward(b.reshape(-1), train)
        return alpha, Cache(self, {"caches": (c1, c2, c3)})

    def backward(self, cache, dalpha):
        c1, c2, c3 = _consume(self, cache)["caches"]
        db = self.sigmoid.backward(c3, dalpha)
        da = self.bn.backward(c2, db.reshape(-1, 1))
        self.r.grad += self.dense.backward(c1, da.reshape(1, -1))

    def fusion_weights(self, train=False) -> np.ndarray:
        return self.forward(train)[0]


def fuse(z_g: np.ndarray, z_l: np.ndarray, alpha_g: float, alpha_l: float) -> np.ndarray:
    if z_g.shape != z_l.shape:
        raise DimensionError(f"fuse: global read {z_g.shape} vs local read {z_l.shape}")
    return alpha_g * z_g + alpha_l * z_l


def fixed_fuse(z_g: np.ndarray, z_l: np.ndarray) -> np.ndarray:
    """The 1:1 non-adaptive combination."""
    return fuse(z_g, z_l, 1.0, 1.0)
