"""Exact scalars: rationals parsed from ``"p/q"`` strings, Gaussian rationals
and sums of square roots of rationals (masses)."""

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import total_ordering
from typing import Iterable, Sequence, Tuple

import sympy

from .errors import InputError


def to_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise InputError("expected a rational, got a boolean")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise InputError("expected a finite rational, got {}".format(value))
        return Fraction(repr(value))
    if isinstance(value, str):
        try:
            return Fraction(value.strip())
        except (ValueError, ZeroDivisionError) as e:
            raise InputError("not a rational: {!r}".format(value)) from e
    if isinstance(value, sympy.Rational):
        return Fraction(int(value.p), int(value.q))
    raise InputError("cannot read a rational from {!r}".format(value))


def format_fraction(value: Fraction) -> str:
    return str(Fraction(value))


@dataclass(frozen=True)
class Gaussian:
    """A Gaussian rational re + i·im."""

    re: Fraction
    im: Fraction = Fraction(0)

    def __post_init__(self):
        object.__setattr__(self, "re", to_fraction(self.re))
        object.__setattr__(self, "im", to_fraction(self.im))

    @classmethod
    def parse(cls, pair: Sequence) -> "Gaussian":
        if len(pair) != 2:
            raise InputError("a complex value is a [re, im] pair, got {!r}".format(pair))
        return cls(to_fraction(pair[0]), to_fraction(pair[1]))

    def __add__(self, other: "Gaussian") -> "Gaussian":
        return Gaussian(self.re + other.re, self.im + other.im)

    def __sub__(self, other: "Gaussian") -> "Gaussian":
        return Gaussian(self.re - other.re, self.im - other.im)

    def __neg__(self) -> "Gaussian":
        return Gaussian(-self.re, -self.im)

    def __mul__(self, other) -> "Gaussian":
        if isinstance(other, Gaussian):
            return Gaussian(
                self.re * other.re - self.im * other.im,
                self.re * other.im + self.im * other.re,
            )
        q = to_fraction(other)
        return Gaussian(self.re * q, self.im * q)

    __rmul__ = __mul__

    def conjugate(self) -> "Gaussian":
        return Gaussian(self.re, -self.im)

    def abs2(self) -> Fraction:
        return self.re * self.re + self.im * self.im

    def is_zero(self) -> bool:
        return self.re == 0 and self.im == 0

    def cross(self, other: "Gaussian") -> Fraction:
        """Positive iff ``other`` lies counter-clockwise of ``self``."""
        return self.re * other.im - self.im * other.re

    def in_right_half_plane(self) -> bool:
        # half plane with arguments in (-pi/2, pi/2]
        return self.re > 0 or (self.re == 0 and self.im > 0)

    def __complex__(self) -> complex:
        return complex(float(self.re), float(self.im))

    def as_pair(self) -> Tuple[str, str]:
        return format_fraction(self.re), format_fraction(self.im)


ZERO = Gaussian(0, 0)
ONE = Gaussian(1, 0)


def gaussian_sum(values: Iterable[Gaussian]) -> Gaussian:
    re = Fraction(0)
    im = Fraction(0)
    for z in values:
        re += z.re
        im += z.im
    return Gaussian(re, im)


@total_ordering
class Mass:
    """Sum of |z| over a list of pieces, kept as the rationals |z|²."""

    __slots__ = ("squares",)

    def __init__(self, squares: Iterable = ()):
        self.squares: Tuple[Fraction, ...] = tuple(to_fraction(q) for q in squares)

    @property
    def value(self) -> sympy.Expr:
        return sympy.Add(
            *[sympy.sqrt(sympy.Rational(q.numerator, q.denominator)) for q in self.squares]
        )

    def __float__(self) -> float:
        return math.fsum(math.sqrt(q) for q in self.squares)

    def __add__(self, other: "Mass") -> "Mass":
        return Mass(self.squares + Mass._coerce(other).squares)

    @staticmethod
    def _coerce(other) -> "Mass":
        if isinstance(other, Mass):
            return other
        q = to_fraction(other)
        if q < 0:
            raise InputError("a mass is nonnegative")
        return Mass([q * q])

    def compare(self, other) -> int:
        other = Mass._coerce(other)
        a, b = float(self), float(other)
        if abs(a - b) > 1e-9 * max(1.0, a, b):
            return 1 if a > b else -1
        try:
            # distinct square-free radicals are independent over Q, so the
            # collected difference is zero exactly when the masses agree
            diff = sympy.expand(self.value - other.value)
            if diff == 0:
                return 0
            return 1 if diff.evalf(60) > 0 else -1
        except TypeError:
            return (a > b) - (a < b)

    def __eq__(self, other) -> bool:
        try:
            return self.compare(other) == 0
        except InputError:
            return NotImplemented

    def __lt__(self, other) -> bool:
        return self.compare(other) < 0

    __hash__ = None

    def __repr__(self) -> str:
        return "Mass({})".format(self.value)
