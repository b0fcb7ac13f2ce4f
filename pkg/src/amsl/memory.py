"""Cosine-scored softmax reads over a learnable C x F memory, with entropy sparsity."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import CacheError, Parameter, softmax

DEGENERATE_NORM = 1e-12
DEAD_ROW_NORM = 1e-8


class DegenerateQueryError(ValueError):
    """A query (or memory row) has zero norm, so cosine scoring is undefined."""


def score(z: np.ndarray, m: np.ndarray) -> float:
    """Cosine similarity between two F-vectors."""
    nz, nm = np.linalg.norm(z), np.linalg.norm(m)
    if nz <= DEGENERATE_NORM or nm <= DEGENERATE_NORM:
        raise DegenerateQueryError("cosine score of a zero-norm vector")
    return float(np.dot(z, m) / (nz * nm))


@dataclass
class AddressResult:
    read: np.ndarray
    weights: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)
    _used: bool = field(default=False, repr=False)


def address(z: np.ndarray, items: np.ndarray) -> AddressResult:
    """Read the memory with one query (F,) or a stack of queries (Q, F).

    weights = softmax over cosine scores against every row; read = weights @ items.
    """
    single = z.ndim == 1
    q = z[None, :] if single else z
    zn_norm = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(zn_norm <= DEGENERATE_NORM):
        bad = int(np.argmax(zn_norm[:, 0] <= DEGENERATE_NORM))
        raise DegenerateQueryError(f"query {bad} has zero norm")
    m_norm = np.linalg.norm(items, axis=1, keepdims=True)
    if np.any(m_norm <= DEGENERATE_NORM):
        raise DegenerateQueryError("memory holds a zero-norm row")
    zhat = q / zn_norm
    mhat = items / m_norm
    w = softmax(zhat @ mhat.T, axis=1)
    read = w @ items
    cache = {"zhat": zhat, "z_norm": zn_norm, "mhat": mhat, "m_norm": m_norm,
             "items": items, "single": single}
    if single:
        return AddressResult(read[0], w[0], cache)
    return AddressResult(read, w, cache)


def sparsity_loss(w: np.ndarray) -> float:
    """Entropy -sum w log w (natural log, 0 log 0 = 0), summed over all rows of ``w``."""
    w = np.asarray(w)
    if np.any(w < 0):
        raise ValueError("addressing weights must be nonnegative")
    w64 = w.astype(np.float64)
    pos = w64 > 0
    return float(-(w64[pos] * np.log(w64[pos])).sum())


def address_backward(result: AddressResult, grad_read: np.ndarray,
                     grad_sparsity_scale: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_read * read) + scale * sparsity_loss(weights)``.

    Returns (grad_z, grad_items) with the shapes of the query and the memory.
    """
    if not result._cache:
        raise CacheError("address_backward: missing cache")
    if result._used:
        raise CacheError("address_backward: stale cache (already consumed)")
    result._used = True
    c = result._cache
    w = result.weights[None, :] if c["single"] else result.weights
    g = grad_read[None, :] if c["single"] else grad_read
    items = c["items"]

    grad_items = w.T @ g
    dw = g @ items.T
    if grad_sparsity_scale:
        dw = dw - grad_sparsity_scale * (np.log(np.maximum(w, np.finfo(w.dtype).tiny)) + 1)
    ds = w * (dw - (dw * w).sum(axis=1, keepdims=True))

    zhat, mhat = c["zhat"], c["mhat"]
    dzhat = ds @ mhat
    dmhat = ds.T @ zhat
    grad_z = (dzhat - (dzhat * zhat).sum(axis=1, keepdims=True) * zhat) / c["z_norm"]
    grad_items = grad_items + (dmhat - (dmhat * mhat).sum(axis=1, keepdims=True) * mhat) / c["m_norm"]
    if c["single"]:
        grad_z = grad_z[0]
    return grad_z, grad_items


class MemoryMatrix:
    """A learnable bank of C prototypical patterns of width F."""

    def __init__(self, capacity: int, features: int, rng: np.random.Generator,
                 dtype=np.float32, name="memory"):
        if capacity < 1 or features < 1:
            raise ValueError("memory needs C >= 1 and F >= 1")
        self.capacity, self.features, self.name = capacity, features, name
        bound = 1.0 / math.sqrt(features)
        self.items = Parameter(rng.uniform(-bound, bound, (capacity, features)).astype(dtype),
                               f"{name}.items")

    def parameters(self):
        return [self.items]

    def address(self, z: np.ndarray) -> AddressResult:
        return address(z, self.items.value)

    def backward(self, result: AddressResult, grad_read, grad_sparsity_scale=0.0) -> np.ndarray:
        grad_z, grad_items = address_backward(result, grad_read, grad_sparsity_scale)
        self.items.grad += grad_items
        return grad_z

    def revive_dead_rows(self, rng: np.random.Generator) -> int:
        """Re-initialize rows whose norm collapsed below 1e-8; return how many."""
        norms = np.linalg.norm(self.items.value, axis=1)
        dead = np.flatnonzero(norms < DEAD_ROW_NORM)
        if dead.size:
            bound = 1.0 / math.sqrt(self.features)
            self.items.value[dead] = rng.uniform(-bound, bound, (dead.size, self.features))
        return int(dead.size)
