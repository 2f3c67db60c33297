"""Link functions and the log-space binomial kernel."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np
from scipy import special

from GFormulaLib.models.errors import DataValidationError

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

_SQRT_2PI = math.sqrt(2.0 * math.pi)
# probit tails: Phi(35) - 1 is below double precision anyway
_PROBIT_CLIP = 35.0


class LinkKind(Enum):
    LOGIT = "logit"
    PROBIT = "probit"


@dataclass(frozen=True)
class LinkFunction:
    """Monotone link g with inverse g^-1 and the derivatives the likelihood and sandwich need."""

    kind: LinkKind = LinkKind.LOGIT

    @classmethod
    def logit(cls) -> LinkFunction:
        return cls(LinkKind.LOGIT)

    @classmethod
    def probit(cls) -> LinkFunction:
        return cls(LinkKind.PROBIT)

    @classmethod
    def from_name(cls, name: str | LinkKind) -> LinkFunction:
        if isinstance(name, LinkKind):
            return cls(name)
        try:
            return cls(LinkKind(name.lower()))
        except ValueError as e:
            raise DataValidationError(f"Unknown link function '{name}'. Must be one of: logit, probit") from e

    @property
    def name(self) -> str:
        return self.kind.value

    def forward(self, p: ArrayLike) -> NDArray[np.float64]:
        if self.kind is LinkKind.LOGIT:
            return special.logit(p)
        return special.ndtri(p)

    def inverse(self, eta: ArrayLike) -> NDArray[np.float64]:
        if self.kind is LinkKind.LOGIT:
            return special.expit(eta)
        return special.ndtr(eta)

    def density(self, eta: ArrayLike) -> NDArray[np.float64]:
        """Derivative of g^-1 with respect to eta."""
        eta = np.asarray(eta, dtype=float)
        if self.kind is LinkKind.LOGIT:
            return special.expit(eta) * special.expit(-eta)
        return np.exp(-0.5 * eta * eta) / _SQRT_2PI

    def density_derivative(self, eta: ArrayLike) -> NDArray[np.float64]:
        eta = np.asarray(eta, dtype=float)
        if self.kind is LinkKind.LOGIT:
            mu = special.expit(eta)
            return mu * (1.0 - mu) * (1.0 - 2.0 * mu)
        return -eta * self.density(eta)

    def log_inverse(self, eta: ArrayLike) -> NDArray[np.float64]:
        eta = np.asarray(eta, dtype=float)
        if self.kind is LinkKind.LOGIT:
            return -np.logaddexp(0.0, -eta)
        return special.log_ndtr(eta)

    def log_inverse_complement(self, eta: ArrayLike) -> NDArray[np.float64]:
        eta = np.asarray(eta, dtype=float)
        if self.kind is LinkKind.LOGIT:
            return -np.logaddexp(0.0, eta)
        return special.log_ndtr(-eta)

    def score_weight(self, eta: ArrayLike) -> NDArray[np.float64]:
        """r(eta) = (g^-1)'(eta) / (mu (1 - mu)); identically one for the canonical logit link."""
        eta = np.asarray(eta, dtype=float)
        if self.kind is LinkKind.LOGIT:
            return np.ones_like(eta)
        eta = np.clip(eta, -_PROBIT_CLIP, _PROBIT_CLIP)
        return self.density(eta) / (special.ndtr(eta) * special.ndtr(-eta))

    def score_weight_derivative(self, eta: ArrayLike) -> NDArray[np.float64]:
        eta = np.asarray(eta, dtype=float)
        if self.kind is LinkKind.LOGIT:
            return np.zeros_like(eta)
        eta = np.clip(eta, -_PROBIT_CLIP, _PROBIT_CLIP)
        mu = special.ndtr(eta)
        mu_c = special.ndtr(-eta)
        v = mu * mu_c
        d1 = self.density(eta)
        return (self.density_derivative(eta) * v - d1 * d1 * (mu_c - mu)) / (v * v)


def link_eval(link: LinkFunction, eta: float) -> float:
    """
    Evaluates the inverse link at a single linear predictor value.

    :param link: The link function.
    :param eta: Finite linear predictor.
    :return: g^-1(eta), strictly inside (0, 1) for moderate eta.
    :raises DataValidationError: If eta is not finite.
    """
    if not math.isfinite(eta):
        raise DataValidationError(f"Linear predictor must be finite, got {eta}")
    return float(link.inverse(eta))


class _LogFactorialTable:
    """log(k!) for k = 0..capacity, grown geometrically as larger clusters show up."""

    def __init__(self, capacity: int = 1024) -> None:
        self._lock = threading.Lock()
        self._table: NDArray[np.float64] = special.gammaln(np.arange(capacity + 1, dtype=float) + 1.0)

    def upto(self, n: int) -> NDArray[np.float64]:
        table = self._table
        if n >= table.size:
            with self._lock:
                capacity = self._table.size
                while capacity <= n:
                    capacity *= 2
                if capacity > self._table.size:
                    self._table = special.gammaln(np.arange(capacity + 1, dtype=float) + 1.0)
                table = self._table
        return table[: n + 1]


_LOG_FACTORIALS = _LogFactorialTable()


def log_binomial_coefficients(n: int) -> NDArray[np.float64]:
    """log C(n, k) for k = 0..n."""
    lf = _LOG_FACTORIALS.upto(n)
    return lf[n] - lf - lf[::-1]


def binomial_pmf(n: int, k: int, p: float) -> float:
    """
    Computes C(n,k) p^k (1-p)^(n-k) in log space.

    :param n: Number of trials, at least one.
    :param k: Number of successes in [0, n].
    :param p: Success probability in [0, 1]; the endpoints are handled exactly.
    :return: The binomial probability mass.
    :raises DataValidationError: If any argument is out of range.
    """
    if n < 1:
        raise DataValidationError(f"Binomial size must be positive, got n={n}")
    if not 0 <= k <= n:
        raise DataValidationError(f"Binomial count k={k} outside [0, {n}]")
    if not 0.0 <= p <= 1.0:
        raise DataValidationError(f"Binomial probability p={p} outside [0, 1]")
    log_c = log_binomial_coefficients(n)[k]
    return float(np.exp(log_c + special.xlogy(k, p) + special.xlog1py(n - k, -p)))


def binomial_pmf_row(n: int, p: ArrayLike) -> NDArray[np.float64]:
    """
    Vectorised pmf over the whole support.

    :param n: Number of trials (zero gives the point mass at k=0).
    :param p: Success probabilities, any shape.
    :return: Array of shape ``p.shape + (n + 1,)`` holding pmf(n, k, p) for k = 0..n.
    """
    p = np.asarray(p, dtype=float)[..., None]
    k = np.arange(n + 1, dtype=float)
    log_pmf = log_binomial_coefficients(n) + special.xlogy(k, p) + special.xlog1py(n - k, -p)
    pmf = np.exp(log_pmf)
    # log-factorial rounding grows with n; rows sum to one up to summation error
    return pmf / pmf.sum(axis=-1, keepdims=True)


def mass_window(pmf: NDArray[np.float64], tail: float) -> slice:
    """Smallest contiguous index window whose complement carries at most ``tail`` mass."""
    cdf = np.cumsum(pmf)
    lo = int(np.searchsorted(cdf, tail / 2.0, side="right"))
    survival = cdf[-1] - cdf
    hi = int(np.argmax(survival <= tail / 2.0)) + 1 if np.any(survival <= tail / 2.0) else pmf.size
    return slice(min(lo, hi - 1), hi)
