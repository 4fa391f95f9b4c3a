"""Market, preference and labor-income parameters.

The asset block is a standard multi-asset Black-Scholes market; the income
block adds a geometric diffusion whose drift is perturbed by a delay
functional (supplied separately as a kernel).  Imperfect correlation between
income shocks and traded shocks is described by a pair of loading matrices
``(C1, C2)`` with ``C1'C1 + C2'C2 = I``: the income noise is
``C1 dZ + C2 dZ*`` with ``Z*`` orthogonal to the market.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AssumptionViolation, DomainError


@dataclass(frozen=True)
class MarketParams:
    r: float                      # riskless rate
    mortality: float              # exponential death-clock intensity
    impatience: float             # subjective time-discount rate
    gamma: float                  # relative risk aversion (gamma != 1)
    bequest_weight: float         # weight of the bequest lump sum inside the utility
    mu: np.ndarray                # asset drifts, shape (n,)
    sigma: np.ndarray             # asset volatility matrix, shape (n, n)
    income_drift: float
    income_vol: np.ndarray        # shape (n,)
    corr_market: np.ndarray | None = None   # C1; None means perfect correlation
    corr_extra: np.ndarray | None = None    # C2; None means zero

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        ivol = np.atleast_1d(np.asarray(self.income_vol, dtype=float))
        n = mu.size
        if sigma.shape != (n, n):
            raise DomainError(f"sigma must be {n}x{n}, got {sigma.shape}")
        if ivol.size != n:
            raise DomainError("income_vol must have one loading per risk factor")
        for name in ("r", "mortality", "impatience", "gamma", "bequest_weight",
                     "income_drift"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"{name} must be finite")
        if self.gamma <= 0 or self.gamma == 1.0:
            raise DomainError("risk aversion gamma must be positive and != 1")
        if self.bequest_weight <= 0:
            raise DomainError("bequest weight must be positive")
        if self.mortality < 0:
            raise DomainError("mortality intensity cannot be negative")
        C1 = self.corr_market
        C2 = self.corr_extra
        C1 = np.eye(n) if C1 is None else np.atleast_2d(np.asarray(C1, dtype=float))
        C2 = np.zeros((n, n)) if C2 is None else np.atleast_2d(np.asarray(C2, dtype=float))
        if C1.shape != (n, n) or C2.shape != (n, n):
            raise DomainError("correlation loadings must be n x n")
        gram = C1.T @ C1 + C2.T @ C2
        if not np.allclose(gram, np.eye(n), atol=1e-10):
            raise AssumptionViolation(
                "correlation-split",
                "income noise loadings must satisfy C1'C1 + C2'C2 = I; "
                f"got deviation {np.max(np.abs(gram - np.eye(n))):.3e}",
            )
        if abs(np.linalg.det(sigma)) < 1e-14 or np.linalg.cond(sigma) > 1e12:
            raise DomainError("asset volatility matrix must be invertible")
        kappa = np.linalg.solve(sigma, mu - self.r * np.ones(n))
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "income_vol", ivol)
        object.__setattr__(self, "corr_market", C1)
        object.__setattr__(self, "corr_extra", C2)
        object.__setattr__(self, "_kappa", kappa)

    # ------------------------------------------------------------------

    @property
    def n(self) -> int:
        return self.mu.size

    @property
    def kappa(self) -> np.ndarray:
        """Market price of risk sigma^{-1} (mu - r 1)."""
        return self._kappa

    @property
    def kappa_sq(self) -> float:
        return float(self._kappa @ self._kappa)

    @property
    def mu_excess(self) -> np.ndarray:
        return self.mu - self.r * np.ones(self.n)

    @property
    def load_market(self) -> np.ndarray:
        """Loading of income noise on the traded Brownian motion: C1' sigma_y."""
        return self.corr_market.T @ self.income_vol

    @property
    def load_extra(self) -> np.ndarray:
        return self.corr_extra.T @ self.income_vol

    @property
    def sigma_y_sq(self) -> float:
        return float(self.income_vol @ self.income_vol)

    @property
    def perfectly_correlated(self) -> bool:
        return np.array_equal(self.corr_market, np.eye(self.n)) and not np.any(
            self.corr_extra
        )

    def income_discount_rate(self) -> float:
        """Effective discount rate of income under the pricing measure.

        ``r + mortality - income_drift + sigma_y' C1 kappa``: only the
        market-spanned part of the income noise earns the risk adjustment.
        """
        return (self.r + self.mortality - self.income_drift
                + float(self.load_market @ self.kappa))

    def impatience_margin(self) -> float:
        """Slack in the transversality condition; must be positive.

        ``impatience + mortality - (1-gamma)(r + mortality + |kappa|^2/(2 gamma))``.
        """
        return (self.impatience + self.mortality
                - (1.0 - self.gamma) * (self.r + self.mortality
                                        + self.kappa_sq / (2.0 * self.gamma)))

    def check_impatience(self):
        margin = self.impatience_margin()
        if margin <= 0:
            raise AssumptionViolation(
                "impatience",
                "transversality margin rho + delta - (1-gamma)(r + delta + "
                f"|kappa|^2/(2 gamma)) = {margin:.6g} must be positive",
            )

    # ------------------------------------------------------------------

    @classmethod
    def single_asset(cls, *, r=0.03, mortality=0.02, impatience=0.04, gamma=2.0,
                     bequest_weight=1.0, mu=0.07, sigma=0.2, income_drift=0.01,
                     income_vol=0.15, rho1=None) -> "MarketParams":
        """Convenience constructor for the scalar market.

        ``rho1`` is the instantaneous correlation between income shocks and
        the single traded shock; ``None`` means perfectly correlated.
        """
        C1 = C2 = None
        if rho1 is not None:
            if not -1.0 <= rho1 <= 1.0:
                raise DomainError("correlation must lie in [-1, 1]")
            C1 = np.array([[float(rho1)]])
            C2 = np.array([[math.sqrt(max(0.0, 1.0 - rho1 * rho1))]])
        return cls(r=r, mortality=mortality, impatience=impatience, gamma=gamma,
                   bequest_weight=bequest_weight, mu=np.array([float(mu)]),
                   sigma=np.array([[float(sigma)]]), income_drift=income_drift,
                   income_vol=np.array([float(income_vol)]),
                   corr_market=C1, corr_extra=C2)

    def replace(self, **changes) -> "MarketParams":
        from dataclasses import replace as _replace
        return _replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "mortality": self.mortality,
            "impatience": self.impatience,
            "gamma": self.gamma,
            "bequest_weight": self.bequest_weight,
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "income_drift": self.income_drift,
            "income_vol": self.income_vol.tolist(),
            "corr_market": self.corr_market.tolist(),
            "corr_extra": self.corr_extra.tolist(),
        }
