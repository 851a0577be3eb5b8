"""Small building blocks over named parameter dictionaries."""

from __future__ import annotations

import hashlib

import numpy as np

from .masks import masked_attention
from .tensor import Tensor, gelu, layer_norm, matmul, parameter


class ParamStore:
    """Ordered name -> Tensor mapping with seeded uniform initialisation."""

    def __init__(self, seed: int, scale: float):
        self.rng = np.random.default_rng(seed)
        self.scale = scale
        self.params: dict[str, Tensor] = {}

    def uniform(self, name: str, shape: tuple) -> Tensor:
        p = parameter(self.rng.uniform(-self.scale, self.scale, size=shape), name=name)
        self.params[name] = p
        return p

    def const(self, name: str, shape: tuple, value: float) -> Tensor:
        p = parameter(np.full(shape, value), name=name)
        self.params[name] = p
        return p

    def linear(self, prefix: str, d_in: int, d_out: int) -> None:
        self.uniform(f"{prefix}.w", (d_in, d_out))
        self.const(f"{prefix}.b", (d_out,), 0.0)

    def norm(self, prefix: str, d: int) -> None:
        self.const(f"{prefix}.g", (d,), 1.0)
        self.const(f"{prefix}.b", (d,), 0.0)

    def attention(self, prefix: str, d_q: int, d_kv: int, d: int) -> None:
        self.linear(f"{prefix}.q", d_q, d)
        self.linear(f"{prefix}.k", d_kv, d)
        self.linear(f"{prefix}.v", d_kv, d)
        self.linear(f"{prefix}.o", d, d)

    def ffn(self, prefix: str, d: int, hidden: int) -> None:
        self.linear(f"{prefix}.fc1", d, hidden)
        self.linear(f"{prefix}.fc2", hidden, d)


def linear(p: dict, prefix: str, x: Tensor) -> Tensor:
    return matmul(x, p[f"{prefix}.w"]) + p[f"{prefix}.b"]


def norm(p: dict, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def ffn(p: dict, prefix: str, x: Tensor) -> Tensor:
    return linear(p, f"{prefix}.fc2", gelu(linear(p, f"{prefix}.fc1", x)))


def attention(p: dict, prefix: str, x: Tensor, kv: Tensor, mask, heads: int) -> Tensor:
    q = linear(p, f"{prefix}.q", x)
    k = linear(p, f"{prefix}.k", kv)
    v = linear(p, f"{prefix}.v", kv)
    return linear(p, f"{prefix}.o", masked_attention(q, k, v, mask, heads))


def content_hash(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
