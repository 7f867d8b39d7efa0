"""Cubic B-spline basis systems and difference penalties."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .errors import ConfigurationError

DEGREE = 3


@dataclass(frozen=True)
class BasisSystem:
    """Clamped cubic B-spline basis with ``q`` functions on ``[a, b]``.

    ``knots`` is the full (clamped) knot vector of length ``q + 4``.
    """

    q: int
    domain: tuple[float, float]
    knots: np.ndarray
    knot_rule: str = "uniform"

    @property
    def interior_knots(self) -> np.ndarray:
        return self.knots[DEGREE + 1 : -(DEGREE + 1)]

    def evaluate(self, t) -> np.ndarray:
        """Return the ``(len(t), q)`` basis matrix at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        a, b = self.domain
        span = b - a
        if np.any(t < a - 1e-12 * span) or np.any(t > b + 1e-12 * span):
            raise ValueError(f"evaluation points outside basis domain [{a}, {b}]")
        t = np.clip(t, a, b)
        return BSpline.design_matrix(t, self.knots, DEGREE).toarray()

    def penalty(self, order: int = 2) -> np.ndarray:
        return penalty_matrix(self, order)

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "domain": [float(self.domain[0]), float(self.domain[1])],
            "knots": [float(k) for k in self.knots],
            "knot_rule": self.knot_rule,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSystem":
        return cls(
            q=int(d["q"]),
            domain=(float(d["domain"][0]), float(d["domain"][1])),
            knots=np.asarray(d["knots"], dtype=float),
            knot_rule=d.get("knot_rule", "uniform"),
        )


def build_basis(q: int = 12, domain=(0.0, 1.0), knot_rule: str = "uniform", data=None) -> BasisSystem:
    """Build a clamped cubic B-spline basis.

    ``knot_rule`` is ``"uniform"`` (equispaced interior knots) or
    ``"quantile"`` (interior knots at empirical quantiles of ``data``).
    """
    if q < DEGREE + 1:
        raise ConfigurationError(f"cubic B-spline basis needs q >= 4, got q={q}")
    a, b = float(domain[0]), float(domain[1])
    if not (np.isfinite(a) and np.isfinite(b)) or b <= a:
        raise ConfigurationError(f"degenerate basis domain [{a}, {b}]")
    n_interior = q - DEGREE - 1
    if knot_rule == "uniform":
        interior = np.linspace(a, b, n_interior + 2)[1:-1]
    elif knot_rule == "quantile":
        if data is None:
            raise ConfigurationError("quantile knot rule requires observation times")
        data = np.asarray(data, dtype=float)
        data = data[(data > a) & (data < b)]
        if data.size == 0 and n_interior > 0:
            raise ConfigurationError("no observation times strictly inside the domain")
        probs = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
        interior = np.quantile(data, probs) if n_interior > 0 else np.empty(0)
    else:
        raise ConfigurationError(f"unknown knot rule {knot_rule!r}")
    knots = np.concatenate([np.full(DEGREE + 1, a), interior, np.full(DEGREE + 1, b)])
    return BasisSystem(q=q, domain=(a, b), knots=knots, knot_rule=knot_rule)


def difference_matrix(q: int, order: int = 2) -> np.ndarray:
    return np.diff(np.eye(q), n=order, axis=0)


def penalty_matrix(basis: BasisSystem, order: int = 2) -> np.ndarray:
    """P-spline roughness penalty ``D'D`` with ``D`` the order-th difference operator."""
    if order not in (1, 2):
        raise ConfigurationError(f"penalty order must be 1 or 2, got {order}")
    if basis.q <= order:
        raise ConfigurationError("need q > penalty order")
    D = difference_matrix(basis.q, order)
    return D.T @ D


def ridged_penalty(omega0: np.ndarray, rel_ridge: float = 1e-8) -> np.ndarray:
    """Make a rank-deficient penalty invertible: ``omega0 + eps * I``.

    ``eps = rel_ridge * trace(omega0) / q``.
    """
    q = omega0.shape[0]
    eps = rel_ridge * np.trace(omega0) / q
    return omega0 + eps * np.eye(q)
