"""Coupling-constant bundle shared by every module.

The three numbers (gamma, kappa, Q) are redundant: Q = gamma/2 + 2/gamma and
gamma = min(sqrt(kappa), 4/sqrt(kappa)).  ``Params`` stores all three and
refuses inconsistent combinations, so downstream code can use whichever form
reads best without re-deriving anything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = ["Params"]

_REL_TOL = 1e-12


def _q_of(gamma: float) -> float:
    return gamma / 2.0 + 2.0 / gamma


@dataclass(frozen=True)
class Params:
    """Consistent (gamma, kappa, Q) triple.

    gamma lies in (0, 2]; kappa may be gamma**2 (<= 4) or 16/gamma**2 (> 4).
    Use :meth:`from_kappa` or :meth:`from_gamma` instead of the raw
    constructor unless all three values are already known.
    """

    gamma: float
    kappa: float
    Q: float

    def __post_init__(self):
        if not 0.0 < self.gamma <= 2.0:
            raise ValueError(f"gamma must lie in (0, 2], got {self.gamma}")
        if self.kappa <= 0.0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if not math.isclose(self.Q, _q_of(self.gamma), rel_tol=_REL_TOL):
            raise ValueError(
                f"Q={self.Q} inconsistent with gamma={self.gamma}; "
                f"expected {_q_of(self.gamma)}"
            )
        sk = math.sqrt(self.kappa)
        if not math.isclose(self.gamma, min(sk, 4.0 / sk), rel_tol=1e-9):
            raise ValueError(
                f"gamma={self.gamma} must equal min(sqrt(kappa), 4/sqrt(kappa))"
                f"={min(sk, 4.0 / sk)} for kappa={self.kappa}"
            )

    @classmethod
    def from_kappa(cls, kappa: float) -> "Params":
        """Build the bundle from kappa alone."""
        sk = math.sqrt(kappa)
        gamma = min(sk, 4.0 / sk)
        return cls(gamma=gamma, kappa=kappa, Q=_q_of(gamma))

    @classmethod
    def from_gamma(cls, gamma: float, *, large_kappa: bool = False) -> "Params":
        """Build the bundle from gamma.

        ``large_kappa`` selects kappa = 16/gamma**2 instead of gamma**2;
        both choices satisfy gamma = min(sqrt(kappa), 4/sqrt(kappa)).
        """
        kappa = 16.0 / gamma**2 if large_kappa else gamma**2
        return cls(gamma=gamma, kappa=kappa, Q=_q_of(gamma))

    @property
    def sqrt_kappa(self) -> float:
        return math.sqrt(self.kappa)
