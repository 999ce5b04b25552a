"""Tagged dual numbers for forward-mode differentiation.

A ``Dual`` carries a value and a tangent. Tangents may be scalars or numpy
arrays; a tangent with a leading axis of length k seeds k directions at once
(the remaining axes broadcast against the value).

Each differentiation pass gets a fresh tag. When two duals with different
tags meet, the one with the larger tag is the outer layer and the other is
treated as a constant at that layer. This keeps nested derivatives
(derivative of a derivative) free of perturbation confusion.
"""

from __future__ import annotations

import itertools

import numpy as np

_tags = itertools.count(1)


def new_tag() -> int:
    return next(_tags)


class Dual:
    __slots__ = ("val", "tan", "tag")
    # Make numpy defer to our reflected operators instead of building object arrays.
    __array_ufunc__ = None

    def __init__(self, val, tan, tag: int):
        self.val = val
        self.tan = tan
        self.tag = tag

    def __repr__(self) -> str:
        return f"Dual({self.val!r}, {self.tan!r}, tag={self.tag})"

    def _split(self, other):
        """Return (a_val, a_tan, b_val, b_tan, tag) at the outermost layer."""
        if isinstance(other, Dual):
            if other.tag == self.tag:
                return self.val, self.tan, other.val, other.tan, self.tag
            if other.tag > self.tag:
                return self, 0.0, other.val, other.tan, other.tag
        return self.val, self.tan, other, 0.0, self.tag

    def __add__(self, other):
        av, at, bv, bt, tag = self._split(other)
        return Dual(av + bv, at + bt, tag)

    __radd__ = __add__

    def __sub__(self, other):
        av, at, bv, bt, tag = self._split(other)
        return Dual(av - bv, at - bt, tag)

    def __rsub__(self, other):
        return Dual(other - self.val, -self.tan, self.tag)

    def __mul__(self, other):
        av, at, bv, bt, tag = self._split(other)
        return Dual(av * bv, at * bv + av * bt, tag)

    __rmul__ = __mul__

    def __truediv__(self, other):
        av, at, bv, bt, tag = self._split(other)
        q = av / bv
        return Dual(q, (at - q * bt) / bv, tag)

    def __rtruediv__(self, other):
        q = other / self.val
        return Dual(q, -q * self.tan / self.val, self.tag)

    def __neg__(self):
        return Dual(-self.val, -self.tan, self.tag)

    def __pos__(self):
        return self

    def __pow__(self, other):
        return power(self, other)

    def __rpow__(self, other):
        return power(other, self)


def value(x):
    """Strip every dual layer and return the primal value."""
    while isinstance(x, Dual):
        x = x.val
    return x


def tangent(x, tag: int, zero=0.0):
    """Tangent of ``x`` for the pass identified by ``tag``."""
    if isinstance(x, Dual) and x.tag == tag:
        return x.tan
    return zero


def _lift(f, df):
    def g(x):
        if isinstance(x, Dual):
            return Dual(g(x.val), df(x.val) * x.tan, x.tag)
        return f(x)

    g.__name__ = f.__name__
    return g


def _float_fn(np_fn):
    def f(x):
        with np.errstate(all="ignore"):
            return np_fn(x)

    f.__name__ = np_fn.__name__
    return f


sin = _lift(_float_fn(np.sin), lambda a: cos(a))
cos = _lift(_float_fn(np.cos), lambda a: -sin(a))
exp = _lift(_float_fn(np.exp), lambda a: exp(a))
log = _lift(_float_fn(np.log), lambda a: 1.0 / a)
sqrt = _lift(_float_fn(np.sqrt), lambda a: 0.5 / sqrt(a))
# d|a|/da = sign(a); zero at the kink by convention.
fabs = _lift(_float_fn(np.abs), lambda a: sign(a))


def sign(x):
    # piecewise constant: no tangent
    with np.errstate(all="ignore"):
        return np.sign(value(x))


def _is_zero(t) -> bool:
    if isinstance(t, Dual):
        return False
    return not np.any(t)


def power(a, b):
    """a ** b with real semantics: negative base and fractional exponent give NaN."""
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        with np.errstate(all="ignore"):
            return np.power(np.asarray(a, dtype=float), b)[()]
    tag = max(x.tag for x in (a, b) if isinstance(x, Dual))
    av, at = (a.val, a.tan) if isinstance(a, Dual) and a.tag == tag else (a, 0.0)
    bv, bt = (b.val, b.tan) if isinstance(b, Dual) and b.tag == tag else (b, 0.0)
    val = power(av, bv)
    tan = 0.0
    if not _is_zero(at):
        tan = bv * power(av, bv - 1.0) * at
    if not _is_zero(bt):
        # b-direction only where it is seeded; ln(a) is NaN for a < 0
        tan = tan + _masked(val * log(av) * bt, bt)
    return Dual(val, tan, tag)


def _masked(term, seed):
    if isinstance(term, Dual) or isinstance(seed, Dual):
        return term
    with np.errstate(all="ignore"):
        return np.where(np.asarray(seed) != 0, term, 0.0)
