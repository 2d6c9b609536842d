"""Dense complex tensors and the small multilinear toolbox built on them.

Layout contract
---------------
Every tensor owns a dense array whose canonical flat layout is
*first index fastest* (Fortran/column-major fiber order). The layout is
fixed forever: mode-d matricization places the mode-d index on the rows
and orders the columns by the remaining indices, first remaining index
fastest, so matricization results and the serialized byte stream are
bit-reproducible.

Modes are 1-based in every public signature, matching the usual
multilinear-algebra convention (mode 1 is the first index).

Element-wise division is floored: any divisor entry with magnitude below
``EPS_DIV`` is replaced by ``EPS_DIV`` before dividing. Division by a
plain Python/NumPy scalar is exact (no floor); scalars are reserved for
exact constants such as grid sizes.

Serialization format (little-endian throughout)::

    bytes 0-3   magic b"TSR1"
    byte  4     kind: 0 = complex128, 1 = float64
    byte  5     order D (number of modes)
    bytes 6-7   reserved, zero
    next 8*D    dims, one uint64 per mode
    payload     elements in canonical first-index-fastest order;
                complex entries as (real, imag) float64 pairs

Tensors are immutable after construction; all operations return new
instances and are safe to call concurrently.
"""

from __future__ import annotations

import math
import struct

import numpy as np

EPS_DIV = 1e-12

_MAGIC = b"TSR1"
_KIND_COMPLEX = 0
_KIND_REAL = 1


class Tensor:
    """Dense complex-valued tensor of order >= 1."""

    __slots__ = ("data",)

    _dtype = np.complex128

    def __init__(self, data):
        arr = np.array(data, dtype=self._dtype, copy=True)
        if arr.ndim == 0:
            raise ValueError("tensors must have order >= 1")
        self._validate(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    # internal no-copy constructor for arrays the callee owns
    @classmethod
    def _wrap(cls, arr):
        t = object.__new__(cls)
        if not arr.flags.writeable:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(t, "data", arr)
        return t

    def _validate(self, arr):
        pass

    def __setattr__(self, name, value):
        raise AttributeError("tensors are immutable")

    # ---- metadata ----

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def order(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __getitem__(self, idx):
        return self.data[idx]

    def __repr__(self):
        kind = type(self).__name__
        return f"{kind}(shape={self.shape})"

    # ---- element-wise arithmetic ----

    def _coerce(self, other):
        """Return (ndarray, real_kind flag) for the other operand."""
        if isinstance(other, Tensor):
            if other.shape != self.shape:
                raise ValueError(
                    f"shape mismatch: {self.shape} vs {other.shape}"
                )
            return other.data, isinstance(other, RealTensor)
        if np.isscalar(other):
            val = np.asarray(other)
            return val, not np.iscomplexobj(val)
        raise TypeError(f"cannot combine tensor with {type(other).__name__}")

    def _lift(self, arr, other_real):
        if isinstance(self, RealTensor) and other_real and not np.iscomplexobj(arr):
            return RealTensor._unchecked(arr)
        return Tensor._wrap(np.asarray(arr, dtype=np.complex128))

    def __add__(self, other):
        data, real = self._coerce(other)
        return self._lift(self.data + data, real)

    __radd__ = __add__

    def __sub__(self, other):
        data, real = self._coerce(other)
        return self._lift(self.data - data, real)

    def __rsub__(self, other):
        data, real = self._coerce(other)
        return self._lift(data - self.data, real)

    def __mul__(self, other):
        data, real = self._coerce(other)
        return self._lift(self.data * data, real)

    __rmul__ = __mul__

    def __neg__(self):
        return self._lift(-self.data, True)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            data, real = self._coerce(other)
            return self._lift(self.data / _floor_divisor(data), real)
        data, real = self._coerce(other)
        return self._lift(self.data / data, real)

    def __rtruediv__(self, other):
        data, real = self._coerce(other)
        return self._lift(data / _floor_divisor(self.data), real)

    def __pow__(self, p):
        base = self.data
        if p < 0:
            base = _floor_divisor(base)
        return self._lift(base**p, True)

    def conj(self):
        return self._lift(np.conj(self.data), True)


class RealTensor(Tensor):
    """Tensor carrying real entries; variance carriers validate >= 0.

    Arithmetic between real tensors stays in this class without
    re-validation (intermediate expressions such as variance differences
    may dip below zero); the non-negativity invariant is enforced at the
    validated construction sites and wherever the inference code floors a
    variance.
    """

    __slots__ = ()

    _dtype = np.float64

    def _validate(self, arr):
        if not (arr >= 0).all():
            raise ValueError("variance carrier entries must be >= 0")

    @classmethod
    def _unchecked(cls, arr):
        return cls._wrap(np.asarray(arr, dtype=np.float64))

    def validate(self):
        """Re-assert the non-negativity invariant, for tests and floors."""
        self._validate(self.data)
        return self


def _floor_divisor(arr):
    mag = np.abs(arr)
    return np.where(mag < EPS_DIV, EPS_DIV, arr)


def _check_mode(t, d):
    if not 1 <= d <= t.order:
        raise ValueError(f"mode {d} out of range for order-{t.order} tensor")


def _same_kind(*tensors):
    return all(isinstance(t, RealTensor) for t in tensors)


def _lift_arr(arr, real_kind):
    if real_kind and not np.iscomplexobj(arr):
        return RealTensor._unchecked(arr)
    return Tensor._wrap(np.asarray(arr, dtype=np.complex128))


# ---- reductions ----

def inner(x: Tensor, y: Tensor) -> complex:
    """Inner product: sum of x[idx] * conj(y[idx]) over all entries."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return complex(np.vdot(y.data.ravel(order="F"), x.data.ravel(order="F")))


def fro_norm(x: Tensor) -> float:
    """Frobenius norm, sqrt(inner(x, x))."""
    return math.sqrt(max(inner(x, x).real, 0.0))


def l1_norm(x: Tensor) -> float:
    """Sum of entry magnitudes."""
    return float(np.abs(x.data).sum())


def abs2(x: Tensor) -> RealTensor:
    """Entry-wise squared magnitude."""
    return RealTensor._unchecked(np.abs(x.data) ** 2)


# ---- matricization and mode products ----

def mode_matricize(x: Tensor, d: int) -> np.ndarray:
    """Mode-d matricization: N_d rows, mode-d fibers as columns."""
    _check_mode(x, d)
    moved = np.moveaxis(x.data, d - 1, 0)
    return np.reshape(moved, (x.shape[d - 1], -1), order="F")


def mode_unmatricize(m: np.ndarray, d: int, shape) -> Tensor:
    """Inverse of mode_matricize for a target tensor shape."""
    shape = tuple(shape)
    if not 1 <= d <= len(shape):
        raise ValueError(f"mode {d} out of range for order-{len(shape)} shape")
    rest = tuple(n for i, n in enumerate(shape) if i != d - 1)
    expected = (shape[d - 1], math.prod(rest) if rest else 1)
    if tuple(m.shape) != expected:
        raise ValueError(f"matrix shape {m.shape} does not match {expected}")
    arr = np.reshape(np.asarray(m), (shape[d - 1],) + rest, order="F")
    arr = np.moveaxis(arr, 0, d - 1).copy()
    return _lift_arr(arr, not np.iscomplexobj(m))


def mode_product(x: Tensor, u: np.ndarray, d: int) -> Tensor:
    """Mode-d tensor-matrix product: replaces N_d with rows(u)."""
    _check_mode(x, d)
    u = np.asarray(u)
    if u.ndim != 2 or u.shape[1] != x.shape[d - 1]:
        raise ValueError(
            f"factor {u.shape} does not match mode-{d} size {x.shape[d - 1]}"
        )
    out = u @ mode_matricize(x, d)
    new_shape = list(x.shape)
    new_shape[d - 1] = u.shape[0]
    return mode_unmatricize(out, d, new_shape)


def mode_order(shape, factors, ascending_size_order: bool = False):
    """Application order for a multi-mode product.

    With the flag set, dimension-shrinking factors apply first and
    dimension-growing factors last (sorted by rows/cols ratio, ties by
    mode index), which minimizes the largest intermediate tensor. Without
    it, factors apply in the given order.
    """
    idx = list(range(len(factors)))
    if not ascending_size_order:
        return idx
    modes = [d for _, d in factors]
    if len(set(modes)) != len(modes):
        raise ValueError("optimized ordering needs at most one factor per mode")

    def ratio(i):
        u, d = factors[i]
        u = np.asarray(u)
        return (u.shape[0] / u.shape[1], d)

    return sorted(idx, key=ratio)


def multi_mode_product(x: Tensor, factors, ascending_size_order: bool = False) -> Tensor:
    """Sequential mode products over (matrix, mode) pairs.

    The result is order-invariant when modes are distinct (multilinearity);
    see `mode_order` for what the flag does.
    """
    out = x
    for i in mode_order(x.shape, factors, ascending_size_order):
        u, d = factors[i]
        out = mode_product(out, u, d)
    return out


def contract_except(x: Tensor, y: Tensor, d: int) -> np.ndarray:
    """Contract over every mode except d: X_(d) @ Y_(d)^T."""
    _check_mode(x, d)
    _check_mode(y, d)
    x_rest = tuple(n for i, n in enumerate(x.shape) if i != d - 1)
    y_rest = tuple(n for i, n in enumerate(y.shape) if i != d - 1)
    if x.order != y.order or x_rest != y_rest:
        raise ValueError(
            f"non-{d} modes must match: {x.shape} vs {y.shape}"
        )
    return mode_matricize(x, d) @ mode_matricize(y, d).T


# ---- element-wise dispatcher ----

def elementwise(op: str, x: Tensor, y=None) -> Tensor:
    """Element-wise operation by name.

    op is one of "mul", "div", "add", "sub" (binary), "abs2" (unary) or
    "pow" (y is the scalar exponent). Provided as the uniform entry point;
    the operators on Tensor are the idiomatic spelling of the same ops.
    """
    if op == "mul":
        return x * y
    if op == "div":
        return x / y
    if op == "add":
        return x + y
    if op == "sub":
        return x - y
    if op == "abs2":
        if y is not None:
            raise ValueError("abs2 is unary")
        return abs2(x)
    if op == "pow":
        return x**y
    raise ValueError(f"unknown element-wise op {op!r}")


# ---- serialization ----

def save_tensor(x: Tensor, path) -> None:
    """Write the documented binary format (header + canonical payload)."""
    kind = _KIND_REAL if isinstance(x, RealTensor) else _KIND_COMPLEX
    header = struct.pack("<4sBBH", _MAGIC, kind, x.order, 0)
    dims = struct.pack(f"<{x.order}Q", *x.shape)
    wire = "<f8" if kind == _KIND_REAL else "<c16"
    payload = x.data.ravel(order="F").astype(wire).tobytes()
    with open(path, "wb") as fh:
        fh.write(header + dims + payload)


def load_tensor(path) -> Tensor:
    """Read a tensor written by `save_tensor`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, kind, order, _ = struct.unpack_from("<4sBBH", blob, 0)
    if magic != _MAGIC:
        raise ValueError("not a tensor file")
    dims = struct.unpack_from(f"<{order}Q", blob, 8)
    count = math.prod(dims)
    wire = np.dtype("<f8") if kind == _KIND_REAL else np.dtype("<c16")
    start = 8 + 8 * order
    flat = np.frombuffer(blob, dtype=wire, count=count, offset=start)
    arr = np.reshape(flat, dims, order="F")
    cls = RealTensor if kind == _KIND_REAL else Tensor
    return cls(arr)
