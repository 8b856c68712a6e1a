"""Logistic response mechanism: propensity, nonresponse odds, and score.

The probability of observing the outcome is
``expit(h(x; alpha) + beta*y)`` with ``h`` linear in ``alpha`` over a
monomial basis.  For this link the score of the response-indicator
likelihood reduces to ``(delta - propensity)`` times the design vector
``(basis values, y)``, which is all the estimation machinery needs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np
from scipy.special import expit

from .basis import BasisSet, parse_formula

__all__ = ["ResponseSpec", "LP_CLAMP"]

# Linear predictors are clamped here before expit/exp so that the
# propensity/odds pair stays internally consistent at double precision;
# expit is saturated well before 35 anyway.  Weight computations use
# log_odds, which is never clamped.
LP_CLAMP = 35.0


@dataclass(frozen=True)
class ResponseSpec:
    """Logistic response model ``logit P(delta=1|x,y) = h(x;alpha) + beta*y``."""

    h_basis: BasisSet
    alpha: tuple[float, ...]
    beta: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "beta", float(self.beta))
        if len(self.alpha) != len(self.h_basis):
            raise ValueError(
                f"{len(self.alpha)} alpha coefficients for "
                f"{len(self.h_basis)} basis terms"
            )

    @property
    def phi(self) -> np.ndarray:
        """Stacked parameter vector (alpha..., beta)."""
        return np.asarray(self.alpha + (self.beta,))

    def with_phi(self, phi: np.ndarray) -> "ResponseSpec":
        phi = np.asarray(phi, dtype=float)
        return replace(self, alpha=tuple(phi[:-1]), beta=float(phi[-1]))

    def h(self, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        return self.h_basis.design(columns) @ np.asarray(self.alpha)

    def linear_predictor(self, columns, y) -> np.ndarray:
        return self.h(columns) + self.beta * np.asarray(y, dtype=float)

    def propensity(self, columns, y) -> np.ndarray:
        """P(delta=1 | x, y), clamped away from exact 0/1 overflow."""
        lp = np.clip(self.linear_predictor(columns, y), -LP_CLAMP, LP_CLAMP)
        return expit(lp)

    def odds(self, columns, y) -> np.ndarray:
        """Odds of nonresponse P(delta=0|x,y) / P(delta=1|x,y)."""
        lp = np.clip(self.linear_predictor(columns, y), -LP_CLAMP, LP_CLAMP)
        return np.exp(-lp)

    def log_odds(self, columns, y) -> np.ndarray:
        """-(h + beta*y) without clamping, for log-space weight math."""
        return -self.linear_predictor(columns, y)

    def design(self, columns, y) -> np.ndarray:
        """Score design vector per row: (basis values, y)."""
        return np.column_stack(
            [self.h_basis.design(columns), np.asarray(y, dtype=float)]
        )

    def score_vector(self, columns, y, delta) -> np.ndarray:
        """(delta - propensity) times the design vector, one row per unit."""
        delta = np.asarray(delta, dtype=float)
        resid = delta - self.propensity(columns, y)
        return resid[:, None] * self.design(columns, y)

    def to_dict(self) -> dict:
        return {
            "h": self.h_basis.render(),
            "alpha": list(self.alpha),
            "beta": self.beta,
        }


def response_from_dict(payload: Mapping, kinds) -> ResponseSpec:
    basis = parse_formula(payload["h"], kinds)
    alpha = payload.get("alpha")
    if alpha is None:
        alpha = [0.0] * len(basis)
    return ResponseSpec(basis, tuple(alpha), float(payload.get("beta", 0.0)))
