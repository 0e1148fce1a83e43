"""Extended rational arithmetic: exact rationals together with +infinity.

All combinatorial masses and integrals in this package are exact
``fractions.Fraction`` values; totals over regions that reach an unbounded
direction may be +infinity.  ``ExtReal`` wraps both cases with arithmetic in
which infinity absorbs under addition, and subtraction is only defined when
the result is determined (``inf - finite = inf``; ``inf - inf`` raises).
"""

from __future__ import annotations

from fractions import Fraction
from typing import Union

RationalLike = Union[int, str, Fraction]


def as_fraction(value: RationalLike) -> Fraction:
    if isinstance(value, Fraction):
        return value
    return Fraction(value)


class ExtReal:
    """A rational number or +infinity, with absorbing arithmetic."""

    __slots__ = ("_num",)

    def __init__(self, value: Union[RationalLike, "ExtReal", None] = 0):
        if isinstance(value, ExtReal):
            self._num = value._num
        elif value is None:
            self._num = None
        else:
            self._num = as_fraction(value)

    @classmethod
    def infinity(cls) -> "ExtReal":
        return cls(None)

    @property
    def is_infinite(self) -> bool:
        return self._num is None

    @property
    def finite(self) -> Fraction:
        if self._num is None:
            raise ArithmeticError("value is infinite")
        return self._num

    def __add__(self, other) -> "ExtReal":
        other = _coerce(other)
        if self._num is None or other._num is None:
            return INF
        return ExtReal(self._num + other._num)

    __radd__ = __add__

    def __sub__(self, other) -> "ExtReal":
        other = _coerce(other)
        if other._num is None:
            if self._num is None:
                raise ArithmeticError("inf - inf is undefined")
            raise ArithmeticError("finite - inf is not representable")
        if self._num is None:
            return INF
        return ExtReal(self._num - other._num)

    def __rsub__(self, other) -> "ExtReal":
        return _coerce(other).__sub__(self)

    def __mul__(self, other) -> "ExtReal":
        other = _coerce(other)
        if self._num is None or other._num is None:
            if self == ZERO or other == ZERO:
                raise ArithmeticError("0 * inf is undefined")
            return INF
        return ExtReal(self._num * other._num)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "ExtReal":
        other = _coerce(other)
        if other._num is None:
            raise ArithmeticError("division by infinity is not supported")
        if other._num == 0:
            raise ZeroDivisionError("division by zero")
        if self._num is None:
            return INF
        return ExtReal(self._num / other._num)

    def __neg__(self) -> "ExtReal":
        if self._num is None:
            raise ArithmeticError("-inf is not representable")
        return ExtReal(-self._num)

    def __eq__(self, other) -> bool:
        try:
            other = _coerce(other)
        except (TypeError, ValueError):
            return NotImplemented
        return self._num == other._num

    def __hash__(self):
        return hash(self._num)

    def __lt__(self, other) -> bool:
        other = _coerce(other)
        if self._num is None:
            return False
        if other._num is None:
            return True
        return self._num < other._num

    def __le__(self, other) -> bool:
        other = _coerce(other)
        return self == other or self < other

    def __gt__(self, other) -> bool:
        return _coerce(other) < self

    def __ge__(self, other) -> bool:
        return _coerce(other) <= self

    def __float__(self) -> float:
        if self._num is None:
            return float("inf")
        return float(self._num)

    def __repr__(self) -> str:
        return f"ExtReal({self.to_token()})"

    def to_token(self) -> str:
        """Wire form: ``p/q`` (always with a denominator) or ``inf``."""
        if self._num is None:
            return "inf"
        return f"{self._num.numerator}/{self._num.denominator}"

    @classmethod
    def from_token(cls, token: str) -> "ExtReal":
        token = token.strip()
        if token in ("inf", "+inf", "oo"):
            return INF
        return cls(Fraction(token))


def _coerce(value) -> ExtReal:
    if isinstance(value, ExtReal):
        return value
    if isinstance(value, (int, Fraction)):
        return ExtReal(value)
    raise TypeError(f"cannot interpret {value!r} as an extended rational")


INF = ExtReal(None)
ZERO = ExtReal(0)
