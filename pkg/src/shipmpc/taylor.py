"""Second-order forward-mode arithmetic for exact Hessians of small blocks.

A :class:`Taylor2` carries a value together with its gradient and Hessian
w.r.t. a fixed set of seed directions.  Values may be scalars or arrays of
any leading batch shape, so one pass can push derivative seeds through the
hand-coded model functions for a whole prediction horizon at once.  Intended
for small seed counts (a dozen directions), not bulk linear algebra.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

Scalar = Union[float, int, np.ndarray, "Taylor2"]


class Taylor2:
    """Truncated second-order Taylor value: (value, gradient, Hessian).

    ``v`` has an arbitrary batch shape S, ``g`` has shape S + (ndir,), and
    ``h`` has shape S + (ndir, ndir).
    """

    __slots__ = ("v", "g", "h")

    def __init__(self, v, g: np.ndarray, h: np.ndarray):
        self.v = v
        self.g = g
        self.h = h

    @staticmethod
    def seed(values: Sequence[float]) -> list["Taylor2"]:
        """Scalar independent variables with identity gradient seeds."""
        values = np.asarray(values, dtype=float)
        n = values.size
        out = []
        for i, v in enumerate(values):
            g = np.zeros(n)
            g[i] = 1.0
            out.append(Taylor2(float(v), g, np.zeros((n, n))))
        return out

    @staticmethod
    def seed_batch(values: np.ndarray) -> list["Taylor2"]:
        """Batched independent variables; ``values`` has shape S + (nvar,).

        Returns one Taylor2 per trailing component, each carrying batch
        shape S and nvar seed directions.
        """
        values = np.asarray(values, dtype=float)
        nvar = values.shape[-1]
        batch = values.shape[:-1]
        out = []
        for i in range(nvar):
            g = np.zeros(batch + (nvar,))
            g[..., i] = 1.0
            out.append(Taylor2(values[..., i].copy(), g, np.zeros(batch + (nvar, nvar))))
        return out

    @staticmethod
    def constant(value, n: int) -> "Taylor2":
        value = np.asarray(value, dtype=float)
        batch = value.shape
        return Taylor2(
            value if batch else float(value),
            np.zeros(batch + (n,)),
            np.zeros(batch + (n, n)),
        )

    # arithmetic -----------------------------------------------------------
    def __add__(self, other: Scalar) -> "Taylor2":
        if isinstance(other, Taylor2):
            return Taylor2(self.v + other.v, self.g + other.g, self.h + other.h)
        return Taylor2(self.v + other, self.g, self.h)

    __radd__ = __add__

    def __sub__(self, other: Scalar) -> "Taylor2":
        if isinstance(other, Taylor2):
            return Taylor2(self.v - other.v, self.g - other.g, self.h - other.h)
        return Taylor2(self.v - other, self.g, self.h)

    def __rsub__(self, other: Scalar) -> "Taylor2":
        return Taylor2(other - self.v, -self.g, -self.h)

    def __neg__(self) -> "Taylor2":
        return Taylor2(-self.v, -self.g, -self.h)

    def __mul__(self, other: Scalar) -> "Taylor2":
        if isinstance(other, Taylor2):
            cross = np.einsum("...i,...j->...ij", self.g, other.g)
            va = np.asarray(self.v)[..., None]
            vb = np.asarray(other.v)[..., None]
            return Taylor2(
                self.v * other.v,
                self.g * vb + other.g * va,
                self.h * vb[..., None]
                + other.h * va[..., None]
                + cross
                + np.swapaxes(cross, -1, -2),
            )
        other = np.asarray(other, dtype=float)
        return Taylor2(
            self.v * other,
            self.g * other[..., None],
            self.h * other[..., None, None],
        )

    __rmul__ = __mul__

    def _chain(self, f, df, d2f) -> "Taylor2":
        """Compose with a scalar function given f, f', f'' at the value."""
        df = np.asarray(df)[..., None]
        d2f = np.asarray(d2f)[..., None, None]
        outer = np.einsum("...i,...j->...ij", self.g, self.g)
        return Taylor2(f, df * self.g, df[..., None] * self.h + d2f * outer)

    def reciprocal(self) -> "Taylor2":
        u = 1.0 / self.v
        return self._chain(u, -u * u, 2.0 * u * u * u)

    def __truediv__(self, other: Scalar) -> "Taylor2":
        if isinstance(other, Taylor2):
            return self * other.reciprocal()
        return self * (1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other: Scalar) -> "Taylor2":
        return self.reciprocal() * other

    def __pow__(self, k: int) -> "Taylor2":
        if not isinstance(k, int) or k < 0:
            raise ValueError("only nonnegative integer powers supported")
        if k == 0:
            return Taylor2.constant(np.ones_like(np.asarray(self.v)), self.g.shape[-1])
        out = self
        for _ in range(k - 1):
            out = out * self
        return out

    def sin(self) -> "Taylor2":
        s, c = np.sin(self.v), np.cos(self.v)
        return self._chain(s, c, -s)

    def cos(self) -> "Taylor2":
        s, c = np.sin(self.v), np.cos(self.v)
        return self._chain(c, -s, -c)


def tsin(x: Scalar):
    """sin for floats, arrays, or Taylor2 values."""
    if isinstance(x, Taylor2):
        return x.sin()
    return np.sin(x)


def tcos(x: Scalar):
    """cos for floats, arrays, or Taylor2 values."""
    if isinstance(x, Taylor2):
        return x.cos()
    return np.cos(x)


def value_of(x: Scalar):
    return x.v if isinstance(x, Taylor2) else x


def sym_hessian(expr: Taylor2) -> np.ndarray:
    """Symmetrized Hessian of an expression (batch shape preserved)."""
    return 0.5 * (expr.h + np.swapaxes(expr.h, -1, -2))
