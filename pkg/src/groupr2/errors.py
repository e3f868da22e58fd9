"""Exception types and the tagged pole value shared across the package."""

import math


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class NumericError(ArithmeticError):
    """A numerical routine failed to converge or produced a non-finite value.

    ``context`` carries the arguments (or a parameter snapshot) that triggered
    the failure so callers can report it.
    """

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = context


class Pole(float):
    """Tagged +inf returned where a density has an integrable singularity.

    Behaves as ``float('inf')`` in arithmetic, so integrators and plotting
    code keep working, while ``isinstance(x, Pole)`` (or :func:`is_pole`)
    lets callers treat the point explicitly.

    Parameters
    ----------
    kind : str
        ``"power"`` for an algebraic singularity, ``"log"`` for a logarithmic
        one.
    """

    def __new__(cls, kind="power"):
        obj = super().__new__(cls, math.inf)
        obj.kind = kind
        return obj

    def __repr__(self):
        return f"Pole({self.kind!r})"

    def __reduce__(self):
        return (Pole, (self.kind,))


def is_pole(x):
    return isinstance(x, Pole)
