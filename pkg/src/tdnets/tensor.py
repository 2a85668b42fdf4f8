"""Dense float64 tensors and the deterministic kernels built on them.

``contract`` never calls BLAS. Every output entry is accumulated as
``((0 + p0) + p1) + ...`` over the paired multi-index in ascending row-major
order, which is exactly what a naive nested loop computes. Results are
therefore bit-reproducible and comparable to brute-force oracles with ``==``.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AxisOutOfRange,
    DuplicateAxis,
    InvalidPermutation,
    ShapeMismatch,
    SizeMismatch,
)

__all__ = [
    "DenseTensor",
    "as_tensor",
    "zeros",
    "ones",
    "contract",
    "permute",
    "reshape",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "inverse_permutation",
]

# Upper bound on the scratch buffer (in elements) used by the chunked
# accumulation path of ``contract``.
_SCRATCH_ELEMS = 1 << 21


class DenseTensor:
    """Immutable n-dimensional float64 array in row-major order.

    ``data`` is the flat view, ``array`` the shaped view; both are read-only.
    A scalar has shape ``()`` and one data element.
    """

    __slots__ = ("_array",)

    def __init__(self, data, shape: Sequence[int] | None = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if math.prod(shape) != arr.size:
                raise SizeMismatch(f"{arr.size} values cannot fill shape {shape}")
            arr = arr.reshape(shape)
        arr.flags.writeable = False
        self._array = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "DenseTensor":
        # Takes ownership without copying; callers must not keep a writable alias.
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray) or arr.dtype != np.float64 or not arr.flags.c_contiguous:
            arr = np.asarray(arr, dtype=np.float64, order="C")
        arr.flags.writeable = False
        t._array = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def ndim(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def data(self) -> np.ndarray:
        return self._array.reshape(-1)

    @property
    def array(self) -> np.ndarray:
        return self._array

    def numpy(self) -> np.ndarray:
        """Writable copy."""
        return self._array.copy()

    def item(self) -> float:
        return float(self._array.reshape(-1)[0]) if self.size == 1 else self._array.item()

    def __getitem__(self, index):
        return self._array[index]

    def __array__(self, dtype=None, copy=None):
        if dtype is not None and dtype != np.float64:
            return self._array.astype(dtype)
        return self._array

    def __len__(self) -> int:
        if not self.shape:
            raise TypeError("len() of a scalar tensor")
        return self.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._array, other._array)

    __hash__ = None

    def bitwise_equal(self, other: "DenseTensor") -> bool:
        return self.shape == other.shape and self._array.tobytes() == other._array.tobytes()

    def __repr__(self) -> str:
        return f"DenseTensor(shape={list(self.shape)}, data={np.array2string(self._array, threshold=20)})"


def as_tensor(x) -> DenseTensor:
    if isinstance(x, DenseTensor):
        return x
    return DenseTensor(x)


def zeros(shape: Sequence[int]) -> DenseTensor:
    return DenseTensor._wrap(np.zeros(tuple(shape)))


def ones(shape: Sequence[int]) -> DenseTensor:
    return DenseTensor._wrap(np.ones(tuple(shape)))


def _check_axes(axes: Iterable[int], ndim: int, which: str) -> tuple[int, ...]:
    out = []
    for ax in axes:
        ax = int(ax)
        if not 0 <= ax < ndim:
            raise AxisOutOfRange(f"axis {ax} out of range for {which} of rank {ndim}")
        out.append(ax)
    if len(set(out)) != len(out):
        raise DuplicateAxis(f"duplicate axis in {which}: {out}")
    return tuple(out)


try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

if numba is not None:
    # No fastmath: LLVM may neither fuse into FMA nor reassociate, so each
    # out[i, j] sees exactly the same sequence of roundings as a naive loop.
    @numba.njit(cache=True, nogil=True)
    def _matmul_jit(a, b, out):  # pragma: no cover - compiled
        m, k = a.shape
        n = b.shape[1]
        for i in range(m):
            row = out[i]
            for p in range(k):
                s = a[i, p]
                bp = b[p]
                for j in range(n):
                    row[j] += s * bp[j]


def ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` for 2-D arrays with strictly sequential summation over k."""
    if numba is not None:
        out = np.zeros((a.shape[0], b.shape[1]))
        if out.size and a.shape[1]:
            _matmul_jit(np.ascontiguousarray(a), np.ascontiguousarray(b), out)
        return out
    return ordered_matmul_numpy(a, b)


def ordered_matmul_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pure-numpy twin of :func:`ordered_matmul`, bit-identical to it.

    Two code paths, identical bits: a plain loop of rank-1 updates when the
    output is large, and a chunked ``cumsum`` (a sequential scan) when the
    summed extent dominates.
    """
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    if k == 0 or m == 0 or n == 0:
        return out
    mn = m * n
    at = np.ascontiguousarray(a.T)
    if mn >= 4096 or k <= 4:
        tmp = np.empty((m, n))
        for j in range(k):
            np.multiply(at[j, :, None], b[None, j, :], out=tmp)
            out += tmp
        return out
    chunk = max(1, _SCRATCH_ELEMS // mn - 1)
    buf = np.empty((min(chunk, k) + 1, m, n))
    for start in range(0, k, chunk):
        stop = min(k, start + chunk)
        c = stop - start
        view = buf[: c + 1]
        view[0] = out
        np.multiply(at[start:stop, :, None], b[start:stop, None, :], out=view[1:])
        np.cumsum(view, axis=0, out=view)
        out = view[c].copy()
    return out


def _contract_arrays(a: np.ndarray, b: np.ndarray, axes_a, axes_b) -> np.ndarray:
    axes_a = _check_axes(axes_a, a.ndim, "a")
    axes_b = _check_axes(axes_b, b.ndim, "b")
    if len(axes_a) != len(axes_b):
        raise ShapeMismatch(f"axis lists differ in length: {axes_a} vs {axes_b}")
    for i, j in zip(axes_a, axes_b):
        if a.shape[i] != b.shape[j]:
            raise ShapeMismatch(
                f"paired extents differ: a axis {i} has {a.shape[i]}, b axis {j} has {b.shape[j]}"
            )
    free_a = [i for i in range(a.ndim) if i not in axes_a]
    free_b = [j for j in range(b.ndim) if j not in axes_b]
    out_shape = tuple(a.shape[i] for i in free_a) + tuple(b.shape[j] for j in free_b)
    m = math.prod(a.shape[i] for i in free_a)
    n = math.prod(b.shape[j] for j in free_b)
    k = math.prod(a.shape[i] for i in axes_a)
    a2 = np.transpose(a, free_a + list(axes_a)).reshape(m, k)
    b2 = np.transpose(b, list(axes_b) + free_b).reshape(k, n)
    return ordered_matmul(a2, b2).reshape(out_shape)


def contract(a: DenseTensor, b: DenseTensor, axes_a: Sequence[int], axes_b: Sequence[int]) -> DenseTensor:
    """Sum over paired axes ``axes_a[i] <-> axes_b[i]``.

    Result axes are a's free axes followed by b's free axes, each in their
    original order. Empty axis lists give the outer product.
    """
    a, b = as_tensor(a), as_tensor(b)
    return DenseTensor._wrap(_contract_arrays(a.array, b.array, axes_a, axes_b))


def _check_perm(order, ndim: int) -> tuple[int, ...]:
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(ndim)):
        raise InvalidPermutation(f"{list(order)} is not a permutation of 0..{ndim - 1}")
    return order


def inverse_permutation(order: Sequence[int]) -> tuple[int, ...]:
    inv = [0] * len(order)
    for i, o in enumerate(order):
        inv[o] = i
    return tuple(inv)


def permute(a: DenseTensor, order: Sequence[int]) -> DenseTensor:
    """Axis ``i`` of the result is axis ``order[i]`` of ``a``; data is copied."""
    a = as_tensor(a)
    order = _check_perm(order, a.ndim)
    return DenseTensor._wrap(np.array(np.transpose(a.array, order), order="C"))


def reshape(a: DenseTensor, new_shape: Sequence[int]) -> DenseTensor:
    a = as_tensor(a)
    new_shape = tuple(int(s) for s in new_shape)
    if math.prod(new_shape) != a.size:
        raise SizeMismatch(f"cannot reshape {list(a.shape)} into {list(new_shape)}")
    return DenseTensor._wrap(a.array.reshape(new_shape))


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(a: DenseTensor, b: DenseTensor, op: str) -> DenseTensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"elementwise {op} on {list(a.shape)} and {list(b.shape)}")
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return DenseTensor._wrap(fn(a.array, b.array))


def add(a, b) -> DenseTensor:
    return elementwise(a, b, "add")


def sub(a, b) -> DenseTensor:
    return elementwise(a, b, "sub")


def mul(a, b) -> DenseTensor:
    return elementwise(a, b, "mul")


def scale(a: DenseTensor, s: float) -> DenseTensor:
    a = as_tensor(a)
    return DenseTensor._wrap(a.array * float(s))
