"""Small numeric kernel: stable softmax/CE/KL, cosine similarity, a
finite-difference gradient oracle and deterministic splittable random streams.

Vectors are plain float64 numpy arrays.
"""
from __future__ import annotations

import hashlib
import math
from typing import Callable, Hashable

import numpy as np

PROB_FLOOR = 1e-12

_MASK64 = (1 << 64) - 1


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def softmax(logits) -> np.ndarray:
    """Softmax along the last axis with max-subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input contains non-finite entries")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, label: int) -> float:
    p = as_vector(probs, "probs")
    if not 0 <= label < p.shape[0]:
        raise IndexError(f"label {label} out of range for {p.shape[0]} classes")
    return float(-math.log(max(p[label], PROB_FLOOR)))


def kl_divergence(p, q) -> float:
    """KL(p || q) with both distributions floored at PROB_FLOOR inside the logs."""
    p = as_vector(p, "p")
    q = as_vector(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} vs {q.shape[0]}")
    lp = np.log(np.maximum(p, PROB_FLOOR))
    lq = np.log(np.maximum(q, PROB_FLOOR))
    return float(np.sum(p * (lp - lq)))


def cosine_similarity(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def finite_diff_gradient(f: Callable[[np.ndarray], float], at, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Divides by the realized step ``(x+h) - (x-h)`` rather than ``2h`` so the
    rounding of the perturbed coordinates does not leak into the quotient.
    ``f`` may return any real scalar type (e.g. an mpmath ``mpf``); the
    difference is taken in that type before converting to float.
    """
    x = as_vector(at, "at").copy()
    grad = np.empty_like(x)
    for i in range(x.shape[0]):
        orig = x[i]
        x[i] = orig + h
        hi = x[i]
        fp = f(x.copy())
        x[i] = orig - h
        lo = x[i]
        fm = f(x.copy())
        x[i] = orig
        if not (math.isfinite(float(fp)) and math.isfinite(float(fm))):
            raise ValueError(f"non-finite function value while differentiating coordinate {i}")
        grad[i] = float((fp - fm) / (hi - lo))
    return grad


def derive_seed(seed: int, label: Hashable) -> int:
    """64-bit child seed from (seed, label); labels are hashed by their repr."""
    h = hashlib.blake2b(digest_size=8, person=b"erapt-split")
    h.update((seed & _MASK64).to_bytes(8, "little"))
    h.update(repr(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class RandomStream:
    """Counter-based uniform stream on top of Philox.

    ``counter`` counts 64-bit words consumed, so ``RandomStream(seed, counter)``
    resumes exactly where a stream with the same seed stood after that many
    words. Doubles take the top 53 bits of one word.
    """

    def __init__(self, seed: int, counter: int = 0):
        if seed < 0 or counter < 0:
            raise ValueError("seed and counter must be non-negative")
        self.seed = int(seed) & _MASK64
        self._bitgen = np.random.Philox(key=self.seed)
        self._counter = 0
        if counter:
            self._bitgen.advance(counter // 4)
            self._bitgen.random_raw(counter % 4)
            self._counter = counter

    @property
    def counter(self) -> int:
        return self._counter

    def split(self, label: Hashable) -> "RandomStream":
        return RandomStream(derive_seed(self.seed, label))

    def raw(self, n: int) -> np.ndarray:
        out = self._bitgen.random_raw(n)
        self._counter += n
        return np.atleast_1d(np.asarray(out, dtype=np.uint64))

    def random(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def uniform(self, lo: float, hi: float, size=None) -> np.ndarray:
        if lo > hi:
            raise ValueError(f"uniform bounds reversed: lo={lo} > hi={hi}")
        shape = () if size is None else size
        n = int(np.prod(shape))
        u = self.random(n).reshape(shape)
        return lo + (hi - lo) * u

    def integer(self, n: int) -> int:
        """One integer uniform in [0, n)."""
        if n < 1:
            raise ValueError("integer range must be non-empty")
        return min(int(self.random(1)[0] * n), n - 1)

    def normal(self, size) -> np.ndarray:
        """Standard normals via Box-Muller, two uniforms per draw."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape))
        u = self.random(2 * n).reshape(2, n)
        u1 = 1.0 - u[0]  # (0, 1]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u[1])
        return z.reshape(shape)

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, counter={self._counter})"


def uniform_vector(stream: RandomStream, dim: int, lo: float, hi: float) -> np.ndarray:
    return stream.uniform(lo, hi, (dim,))
