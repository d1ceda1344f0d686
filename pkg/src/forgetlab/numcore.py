"""Shared numeric primitives: seeded RNG streams, flat parameter vectors, small linear algebra."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np


class DegeneratePlaneError(ValueError):
    """Raised when two directions cannot span a plane (zero or parallel)."""


class LayoutMismatchError(ValueError):
    """Raised when two ParamVectors with different layouts are combined."""


def _philox_key(seed: int, label: str) -> int:
    # Fixed, documented derivation: sha256 over "seed|label" -> 128-bit Philox key.
    # Distinct labels give independent counter-based streams on every platform.
    digest = hashlib.sha256(f"{seed}|{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


class RngStream:
    """Deterministic random stream backed by the counter-based Philox generator.

    A stream is identified by (seed, label). Identical pairs yield bit-identical
    draw sequences; distinct labels yield independent streams. ``derive``
    produces a child stream whose label extends the parent's, so components can
    own their randomness without coordinating draw order.
    """

    def __init__(self, seed: int, label: str = ""):
        if not isinstance(seed, (int, np.integer)):
            raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
        self.seed = int(seed)
        self.label = label
        self._gen = np.random.Generator(np.random.Philox(key=_philox_key(self.seed, label)))

    def derive(self, label: str) -> "RngStream":
        child = f"{self.label}/{label}" if self.label else label
        return RngStream(self.seed, child)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size=None, replace: bool = False, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace, p=p)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, label={self.label!r})"


Layout = tuple[tuple[str, tuple[int, ...]], ...]


@dataclass
class ParamVector:
    """Flat 64-bit view of a named parameter collection plus the layout to rebuild it."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("ParamVector values must be one-dimensional")
        expected = sum(int(np.prod(shape, dtype=np.int64)) for _, shape in self.layout)
        if expected != self.values.size:
            raise LayoutMismatchError(
                f"layout describes {expected} values, vector holds {self.values.size}"
            )

    @property
    def size(self) -> int:
        return self.values.size

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def _check(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise LayoutMismatchError("ParamVector layouts differ")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.values * float(scalar), self.layout)

    __rmul__ = __mul__

    def dot(self, other: "ParamVector") -> float:
        self._check(other)
        return float(np.dot(self.values, other.values))

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def flatten(params: dict[str, np.ndarray]) -> ParamVector:
    """Concatenate named arrays into one float64 vector.

    Layout order is sorted by name, so the result depends only on the
    collection's contents, never on dict insertion order.
    """
    names = sorted(params)
    layout = tuple((name, tuple(np.shape(params[name]))) for name in names)
    if names:
        values = np.concatenate([np.asarray(params[name], dtype=np.float64).ravel() for name in names])
    else:
        values = np.zeros(0)
    return ParamVector(values, layout)


def unflatten(vec: ParamVector) -> dict[str, np.ndarray]:
    """Rebuild the named collection recorded in ``vec.layout``. Arrays are fresh copies."""
    out: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in vec.layout:
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = vec.values[offset : offset + n].reshape(shape).copy()
        offset += n
    return out


def gram_schmidt_pair(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal basis (d1, d2) of the plane spanned by u and v.

    d1 points along u; d2 is v with its u-component removed, normalized.
    Raises DegeneratePlaneError when u is zero or v is (numerically) parallel to u.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    if nu == 0.0:
        raise DegeneratePlaneError("first direction is zero")
    d1 = u / nu
    w = v - np.dot(v, d1) * d1
    nw = np.linalg.norm(w)
    nv = np.linalg.norm(v)
    if nv == 0.0 or nw <= 1e-12 * nv:
        raise DegeneratePlaneError("directions are parallel or second direction is zero")
    return d1, w / nw


def least_squares_apply(A: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Solve min_b ||A b - x||_2 via Householder QR; returns (b, rank_deficient).

    Forming an explicit pseudo-inverse is avoided on purpose: for tall matrices
    it is memory-hungry and numerically unstable. On rank deficiency the
    minimum-norm solution (SVD) is returned with the flag set.
    """
    A = np.asarray(A, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if A.ndim != 2 or x.ndim != 1 or A.shape[0] != x.shape[0]:
        raise ValueError(f"shape mismatch: A is {A.shape}, x has length {x.shape}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(x))):
        raise ValueError("least squares inputs must be finite")
    q, r = np.linalg.qr(A, mode="reduced")
    diag = np.abs(np.diag(r))
    tol = np.finfo(np.float64).eps * max(A.shape) * (diag.max() if diag.size else 0.0)
    if diag.size == 0 or diag.min() <= tol:
        b, *_ = np.linalg.lstsq(A, x, rcond=None)
        return b, True
    b = np.linalg.solve(r, q.T @ x)
    return b, False


def require_finite(arr: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")
    return arr
