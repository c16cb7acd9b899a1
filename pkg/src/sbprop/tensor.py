"""Dense tensor value type, deterministic RNG, and the elementary kernels.

Values are 64-bit floats in row-major (C) order throughout.  Kernels are pure
functions: the same inputs produce bit-identical outputs (per backend), and
every kernel validates that its output is finite -- NaN/Inf raises
``NumericsError`` instead of propagating silently.

There is no broadcasting engine beyond what the listed kernels need:
``matmul`` is a strict 2-D product, ``layer_norm`` normalizes the last axis,
elementwise kernels require identical shapes.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from . import backend
from .errors import NumericsError, ShapeError

__all__ = [
    "Tensor",
    "Rng",
    "matmul",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "relu",
    "add",
    "mul",
    "scale",
]


class Tensor:
    """Dense n-dimensional float64 array with row-major flat storage.

    Invariant: ``prod(shape) == data.size`` (enforced by construction; the
    backing array is always C-contiguous float64).
    """

    __slots__ = ("array",)

    def __init__(self, data, shape: Iterable[int] | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if shape is not None:
            arr = arr.reshape(tuple(shape))
        self.array = np.ascontiguousarray(arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the storage."""
        return self.array.reshape(-1)

    def tolist(self):
        return self.array.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.array
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def _run_kernel(op: str, fn, *args) -> Tensor:
    # non-finite results are this module's error surface, not a warning
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        arr = fn(*args)
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op} produced non-finite values")
    return Tensor(arr)


def matmul(a, b) -> Tensor:
    """Standard matrix product of a[m, k] and b[k, p]."""
    av, bv = _as_array(a), _as_array(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {av.shape} vs {bv.shape}")
    return _run_kernel("matmul", backend.matmul, av, bv)


def softmax_rows(x) -> Tensor:
    """Row-stochastic softmax of x[m, n]; max-subtracted, overflow-free."""
    xv = _as_array(x)
    if xv.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D input, got {xv.shape}")
    return _run_kernel("softmax_rows", backend.softmax_lastdim, xv)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-vector normalization over the last axis, then affine by gamma/beta."""
    xv, gv, bv = _as_array(x), _as_array(gamma), _as_array(beta)
    c = xv.shape[-1]
    if gv.shape != (c,) or bv.shape != (c,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({c},), got {gv.shape} and {bv.shape}"
        )
    return _run_kernel("layer_norm", backend.layer_norm, xv, gv, bv, eps)


def gelu(x) -> Tensor:
    """Exact-erf GELU."""
    return _run_kernel("gelu", backend.gelu, _as_array(x))


def relu(x) -> Tensor:
    return _run_kernel("relu", backend.relu, _as_array(x))


def _elementwise_pair(a, b, op: str) -> tuple[np.ndarray, np.ndarray]:
    av, bv = _as_array(a), _as_array(b)
    if av.shape != bv.shape:
        raise ShapeError(f"{op} operands must have identical shapes: {av.shape} vs {bv.shape}")
    return av, bv


def add(a, b) -> Tensor:
    av, bv = _elementwise_pair(a, b, "add")
    return _run_kernel("add", backend.add, av, bv)


def mul(a, b) -> Tensor:
    av, bv = _elementwise_pair(a, b, "mul")
    return _run_kernel("mul", backend.mul, av, bv)


def scale(x, c: float) -> Tensor:
    return _run_kernel("scale", backend.scale, _as_array(x), float(c))


class Rng:
    """Deterministic random stream: PCG64 seeded through ``SeedSequence``.

    The generator algorithm is fixed (NumPy's PCG64) and part of the
    reproducibility contract: identical seed and call sequence give identical
    outputs.  A stream is single-owner; derive independent child streams with
    :meth:`derive` instead of sharing one across components.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = _key
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence((self.seed, *_key))))

    def derive(self, *key: int) -> "Rng":
        """Independent child stream; same (seed, key) always gives the same stream."""
        return Rng(self.seed, self._key + tuple(int(k) for k in key))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_sorted(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), returned sorted."""
        return np.sort(self._gen.choice(n, size=k, replace=False))
