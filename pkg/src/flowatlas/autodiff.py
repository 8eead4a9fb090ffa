"""Forward-mode automatic differentiation on dual numbers.

Two carrier types are provided: :class:`Dual` propagates a first
directional derivative, :class:`Dual2` additionally propagates the second
directional derivative along the same seed direction (i.e. the quadratic
form v^T H v per output).  Payloads are numpy float64 scalars or arrays,
so a single pass can be batched over many evaluation points.

The elementary operation set is deliberately closed: add, sub, mul, div,
neg, matmul-by-constant, exp, log, tanh.  Everything built from these is
C^2, which the geodesic initial-value problem relies on.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError

__all__ = [
    "Dual",
    "Dual2",
    "SmoothFn",
    "jvp",
    "jacobian",
    "quadratic_form",
    "tanh",
    "exp",
    "log",
]

#: Names of the elementary operations dual arithmetic supports.
ELEMENTARY_OPS = ("add", "sub", "mul", "div", "neg", "affine", "exp", "log", "tanh")


def _is_torch(x):
    return type(x).__module__.split(".")[0] == "torch"


class Dual:
    """First-order dual number: value + epsilon * tangent."""

    __slots__ = ("value", "tangent")
    __array_priority__ = 100  # keep numpy from hijacking reflected ops

    def __init__(self, value, tangent):
        self.value = np.asarray(value, dtype=np.float64)
        self.tangent = np.asarray(tangent, dtype=np.float64)

    def __repr__(self):
        return f"Dual({self.value!r}, {self.tangent!r})"

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value + other.value, self.tangent + other.tangent)
        return Dual(self.value + other, self.tangent + np.zeros_like(np.asarray(other, dtype=np.float64)))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value - other.value, self.tangent - other.tangent)
        return Dual(self.value - other, self.tangent + np.zeros_like(np.asarray(other, dtype=np.float64)))

    def __rsub__(self, other):
        return Dual(other - self.value, np.zeros_like(np.asarray(other, dtype=np.float64)) - self.tangent)

    def __neg__(self):
        return Dual(-self.value, -self.tangent)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value * other.value,
                        self.tangent * other.value + self.value * other.tangent)
        return Dual(self.value * other, self.tangent * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            q = self.value / other.value
            return Dual(q, (self.tangent - q * other.tangent) / other.value)
        return Dual(self.value / other, self.tangent / other)

    def __rtruediv__(self, other):
        q = other / self.value
        return Dual(q, -q * self.tangent / self.value)

    def __matmul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value @ other.value,
                        self.tangent @ other.value + self.value @ other.tangent)
        return Dual(self.value @ other, self.tangent @ other)

    def __rmatmul__(self, other):
        return Dual(other @ self.value, other @ self.tangent)

    def __getitem__(self, key):
        return Dual(self.value[key], self.tangent[key])

    def exp(self):
        v = np.exp(self.value)
        return Dual(v, v * self.tangent)

    def log(self):
        return Dual(np.log(self.value), self.tangent / self.value)

    def tanh(self):
        v = np.tanh(self.value)
        return Dual(v, (1.0 - v * v) * self.tangent)


class Dual2:
    """Second-order dual along one direction: value, d1, d2.

    Arithmetic coincides with nesting Dual-over-Dual with a repeated seed,
    so ``d2`` of an output is v^T H v without materializing the Hessian.
    """

    __slots__ = ("value", "d1", "d2")
    __array_priority__ = 100

    def __init__(self, value, d1, d2):
        self.value = np.asarray(value, dtype=np.float64)
        self.d1 = np.asarray(d1, dtype=np.float64)
        self.d2 = np.asarray(d2, dtype=np.float64)

    def __repr__(self):
        return f"Dual2({self.value!r}, {self.d1!r}, {self.d2!r})"

    def __add__(self, other):
        if isinstance(other, Dual2):
            return Dual2(self.value + other.value, self.d1 + other.d1, self.d2 + other.d2)
        z = np.zeros_like(np.asarray(other, dtype=np.float64))
        return Dual2(self.value + other, self.d1 + z, self.d2 + z)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual2):
            return Dual2(self.value - other.value, self.d1 - other.d1, self.d2 - other.d2)
        z = np.zeros_like(np.asarray(other, dtype=np.float64))
        return Dual2(self.value - other, self.d1 + z, self.d2 + z)

    def __rsub__(self, other):
        return Dual2(other - self.value, -self.d1, -self.d2)

    def __neg__(self):
        return Dual2(-self.value, -self.d1, -self.d2)

    def __mul__(self, other):
        if isinstance(other, Dual2):
            return Dual2(self.value * other.value,
                         self.d1 * other.value + self.value * other.d1,
                         self.d2 * other.value + 2.0 * self.d1 * other.d1 + self.value * other.d2)
        return Dual2(self.value * other, self.d1 * other, self.d2 * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual2):
            q = self.value / other.value
            q1 = (self.d1 - q * other.d1) / other.value
            q2 = (self.d2 - 2.0 * q1 * other.d1 - q * other.d2) / other.value
            return Dual2(q, q1, q2)
        return Dual2(self.value / other, self.d1 / other, self.d2 / other)

    def __rtruediv__(self, other):
        q = other / self.value
        q1 = -q * self.d1 / self.value
        q2 = (-2.0 * q1 * self.d1 - q * self.d2) / self.value
        return Dual2(q, q1, q2)

    def __matmul__(self, other):
        if isinstance(other, Dual2):
            return Dual2(self.value @ other.value,
                         self.d1 @ other.value + self.value @ other.d1,
                         self.d2 @ other.value + 2.0 * (self.d1 @ other.d1) + self.value @ other.d2)
        return Dual2(self.value @ other, self.d1 @ other, self.d2 @ other)

    def __rmatmul__(self, other):
        return Dual2(other @ self.value, other @ self.d1, other @ self.d2)

    def __getitem__(self, key):
        return Dual2(self.value[key], self.d1[key], self.d2[key])

    def exp(self):
        v = np.exp(self.value)
        return Dual2(v, v * self.d1, v * (self.d2 + self.d1 * self.d1))

    def log(self):
        r = self.d1 / self.value
        return Dual2(np.log(self.value), r, self.d2 / self.value - r * r)

    def tanh(self):
        v = np.tanh(self.value)
        s = 1.0 - v * v
        return Dual2(v, s * self.d1, s * self.d2 - 2.0 * v * s * self.d1 * self.d1)


def tanh(x):
    """tanh dispatching over Dual, Dual2, torch tensors and numpy arrays."""
    if isinstance(x, (Dual, Dual2)):
        return x.tanh()
    if _is_torch(x):
        return x.tanh()
    return np.tanh(x)


def exp(x):
    if isinstance(x, (Dual, Dual2)):
        return x.exp()
    if _is_torch(x):
        return x.exp()
    return np.exp(x)


def log(x):
    if isinstance(x, (Dual, Dual2)):
        return x.log()
    if _is_torch(x):
        return x.log()
    return np.log(x)


class SmoothFn:
    """A C^2 map R^n -> R^m built from the closed elementary op set.

    ``fn`` must accept any of: numpy arrays, :class:`Dual`, :class:`Dual2`
    (shape ``[..., n]``) and apply only operations overloaded on them.
    """

    def __init__(self, fn, n_in, n_out):
        self.fn = fn
        self.n_in = int(n_in)
        self.n_out = int(n_out)

    def __call__(self, x):
        return self.fn(x)


def _as_callable(f):
    return f.fn if isinstance(f, SmoothFn) else f


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")
    return arr


def jvp(f, z, v):
    """Jacobian-vector product (df/dz) v in a single forward pass.

    ``z`` and ``v`` have shape ``[..., n]``; the result has shape
    ``[..., m]``.
    """
    fn = _as_callable(f)
    z = np.asarray(z, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = fn(Dual(z, np.broadcast_to(v, z.shape)))
    return _check_finite(out.tangent, "jvp")


def jacobian(f, z):
    """Full Jacobian by n forward passes, one per input coordinate.

    Returns shape ``[..., m, n]`` (``[m, n]`` for a single point).
    """
    fn = _as_callable(f)
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[-1]
    cols = []
    for j in range(n):
        seed = np.zeros_like(z)
        seed[..., j] = 1.0
        cols.append(fn(Dual(z, seed)).tangent)
    return _check_finite(np.stack(cols, axis=-1), "jacobian")


def quadratic_form(f, z, v):
    """Second directional derivative sum_ij (d2 f_m / dz_i dz_j) v_i v_j.

    One Dual2 pass; shapes as in :func:`jvp`.
    """
    fn = _as_callable(f)
    z = np.asarray(z, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    vb = np.broadcast_to(v, z.shape)
    out = fn(Dual2(z, vb, np.zeros_like(z)))
    return _check_finite(out.d2, "quadratic_form")
