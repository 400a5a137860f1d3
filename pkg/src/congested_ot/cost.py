"""Congestion costs with p-growth and their closed-form Legendre transforms.

Both families share one formula on each edge ``e`` with weight ``w_e > 0``::

    H(z)   = w * (delta * |z| + alpha * |z|**p / p)
    H*(xi) = w * alpha**(1 - q) * (|xi| / w - delta)_+**q / q

``kind="power"`` is the special case ``delta = 0``, where the conjugate
simplifies to ``(alpha * w)**(1 - q) * |xi|**q / q``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

KINDS = ("power", "power_delta")


@dataclass(frozen=True)
class CostModel:
    """Isotropic per-edge congestion cost.

    Args:
        kind: ``"power"`` or ``"power_delta"``.
        p: growth exponent, ``1 < p < inf``.
        alpha: coefficient of the power term.
        delta: threshold of the linear term (``power_delta`` only).
        weights: optional positive per-edge multiplicative weights ``w(x_e)``.
    """

    kind: str = "power"
    p: float = 2.0
    alpha: float = 1.0
    delta: float = 0.0
    weights: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"cost kind must be one of {KINDS}, got {self.kind!r}")
        if not (np.isfinite(self.p) and self.p > 1):
            raise ValueError(f"exponent p must satisfy 1 < p < inf, got {self.p}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.delta < 0:
            raise ValueError(f"delta must be nonnegative, got {self.delta}")
        if self.kind == "power" and self.delta != 0:
            raise ValueError("delta is only allowed for kind='power_delta'")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float).ravel()
            if np.any(~np.isfinite(w)) or np.any(w <= 0):
                raise ValueError("cost weights must be positive and finite")
            object.__setattr__(self, "weights", w)
        for name in ("p", "alpha", "delta"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def power(cls, p: float, alpha: float = 1.0, weights=None) -> "CostModel":
        return cls("power", p, alpha, 0.0, weights)

    @classmethod
    def power_delta(cls, p: float, delta: float, alpha: float = 1.0, weights=None) -> "CostModel":
        return cls("power_delta", p, alpha, delta, weights)

    @property
    def q(self) -> float:
        return self.p / (self.p - 1.0)

    def edge_weights(self, edges=None) -> np.ndarray | float:
        """Weights ``w`` at the given edge indices (all edges if None)."""
        if self.weights is None:
            return 1.0
        if edges is None:
            return self.weights
        return self.weights[edges]

    def check_grid(self, num_edges: int) -> None:
        if self.weights is not None and self.weights.size != num_edges:
            raise ValueError(
                f"cost has {self.weights.size} edge weights, grid has {num_edges} edges"
            )

    # --- vectorised evaluations (arrays aligned with ``edges``) --------------

    def H(self, z, edges=None) -> np.ndarray:
        """Cost density ``H(x_e, z)`` for ``z >= 0``."""
        z = np.asarray(z, dtype=float)
        if np.any(z < 0):
            raise ValueError("H is evaluated at nonnegative arguments only")
        w = self.edge_weights(edges)
        return w * (self.delta * z + self.alpha * z**self.p / self.p)

    def dH(self, z, edges=None) -> np.ndarray:
        """Right derivative ``H'(x_e, z)`` for ``z >= 0`` (``w*delta`` at 0)."""
        z = np.asarray(z, dtype=float)
        if np.any(z < 0):
            raise ValueError("H' is evaluated at nonnegative arguments only")
        w = self.edge_weights(edges)
        return w * (self.delta + self.alpha * z ** (self.p - 1.0))

    def _excess(self, xi, edges):
        w = self.edge_weights(edges)
        return w, np.maximum(np.abs(xi) / w - self.delta, 0.0)

    def H_star(self, xi, edges=None) -> np.ndarray:
        q = self.q
        w, s = self._excess(np.asarray(xi, dtype=float), edges)
        return w * self.alpha ** (1.0 - q) * s**q / q

    def grad_H_star(self, xi, edges=None) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        q = self.q
        _, s = self._excess(xi, edges)
        return self.alpha ** (1.0 - q) * s ** (q - 1.0) * np.sign(xi)

    def hess_H_star(self, xi, edges=None) -> np.ndarray:
        """Second derivative of ``H*``.

        Zero on the flat region ``|xi| < w*delta``.  At ``xi = 0`` with
        ``delta = 0`` it is zero for ``q > 2`` and infinite for ``q < 2``.
        """
        xi = np.asarray(xi, dtype=float)
        q = self.q
        w, s = self._excess(xi, edges)
        with np.errstate(divide="ignore"):
            curv = self.alpha ** (1.0 - q) * (q - 1.0) * s ** (q - 2.0) / w
        if self.delta > 0 or q > 2:
            at_zero = 0.0
        elif q < 2:
            at_zero = np.inf
        else:
            at_zero = curv
        return np.where(s > 0, curv, at_zero)

    # --- scalar API ----------------------------------------------------------

    def eval_H(self, edge_index: int | None, z: float) -> float:
        if z < 0:
            raise ValueError(f"H is defined for z >= 0, got {z}")
        return float(self.H(z, edge_index))

    def eval_H_star(self, edge_index: int | None, xi: float) -> float:
        return float(self.H_star(xi, edge_index))

    def eval_grad_H_star(self, edge_index: int | None, xi: float) -> float:
        return float(self.grad_H_star(xi, edge_index))


@dataclass
class GrowthReport:
    """Outcome of :func:`check_growth` on a set of sample points."""

    lam: float
    lower_ok: bool
    upper_ok: bool
    largest_lambda: float
    lower_violations: list = field(default_factory=list)
    upper_violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.lower_ok and self.upper_ok


def check_growth(cost: CostModel, lam: float, sample_zs: Sequence[float]) -> GrowthReport:
    """Check ``lam*(t**p - 1) <= H(x, t) <= (t**p + 1)/lam`` on samples.

    All edge weights are checked.  ``largest_lambda`` is the largest value in
    ``(0, 1]`` for which both bounds hold on every sample (0 if none does).
    """
    if not 0 < lam <= 1:
        raise ValueError(f"lambda must lie in (0, 1], got {lam}")
    zs = np.asarray(sample_zs, dtype=float).ravel()
    if zs.size == 0:
        raise ValueError("need at least one sample point")
    if np.any(zs < 0):
        raise ValueError("growth is checked on nonnegative samples")
    w = cost.weights if cost.weights is not None else np.ones(1)
    tp = zs[:, None] ** cost.p
    Hz = w[None, :] * (cost.delta * zs[:, None] + cost.alpha * tp / cost.p)
    lower = lam * (tp - 1.0) <= Hz * (1 + 1e-14)
    upper = Hz <= (tp + 1.0) / lam * (1 + 1e-14)

    with np.errstate(divide="ignore", invalid="ignore"):
        lo_bound = np.where(tp > 1, Hz / (tp - 1.0), np.inf)
        up_bound = np.where(Hz > 0, (tp + 1.0) / Hz, np.inf)
    largest = float(min(1.0, lo_bound.min(), up_bound.min()))

    return GrowthReport(
        lam=lam,
        lower_ok=bool(lower.all()),
        upper_ok=bool(upper.all()),
        largest_lambda=max(largest, 0.0),
        lower_violations=zs[~lower.all(axis=1)].tolist(),
        upper_violations=zs[~upper.all(axis=1)].tolist(),
    )
