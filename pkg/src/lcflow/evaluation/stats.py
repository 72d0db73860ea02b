"""Exact one-sided McNemar test."""

from __future__ import annotations

from fractions import Fraction
from math import comb

from .metrics import PairedOutcomes


def binomial_upper_tail(n: int, b: int) -> Fraction:
    """Pr[Binomial(n, 1/2) >= b] as an exact fraction."""
    if n < 0 or b < 0:
        raise ValueError("counts must be non-negative")
    if n == 0:
        return Fraction(1)
    return Fraction(sum(comb(n, k) for k in range(b, n + 1)), 2 ** n)


def mcnemar_exact_p(outcomes: PairedOutcomes | tuple[int, int]) -> float:
    """One-sided p-value that method A beats method B.

    Only discordant pairs count: b = A right / B wrong, c = A wrong / B right.
    With no discordant pairs the test has no evidence and returns 1.0.
    """
    b, c = outcomes.discordant() if isinstance(outcomes, PairedOutcomes) else outcomes
    return float(binomial_upper_tail(b + c, b))
