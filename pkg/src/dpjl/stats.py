"""Scalar statistical kernels: Gaussian CDF/quantile, chi-square quantiles and
expectations over the inverse-chi law used by the JL mechanism."""

from __future__ import annotations

import dataclasses
import functools
import math
from typing import Callable, NamedTuple

import numpy as np
from scipy import special

__all__ = [
    "std_normal_cdf",
    "std_normal_sf",
    "std_normal_inv_cdf",
    "chi2_quantile",
    "QuadratureSpec",
    "QuadratureError",
    "ChiRule",
    "chi_rule",
    "expectation_over_chi",
    "converge_chi_rule",
]


def std_normal_cdf(x):
    """Phi(x), accurate in the lower tail down to subnormal probabilities."""
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("std_normal_cdf: NaN input")
    out = special.ndtr(x)
    return float(out) if out.ndim == 0 else out


def std_normal_sf(x):
    """1 - Phi(x) without cancellation."""
    return std_normal_cdf(-np.asarray(x, dtype=np.float64))


def std_normal_inv_cdf(p):
    p = np.asarray(p, dtype=np.float64)
    if np.isnan(p).any() or (p <= 0).any() or (p >= 1).any():
        raise ValueError("std_normal_inv_cdf: p must lie strictly inside (0, 1)")
    out = special.ndtri(p)
    return float(out) if out.ndim == 0 else out


def chi2_quantile(r: int, p):
    """q with P[chi2_r <= q] = p.

    Inverts the regularized incomplete gamma function, using the upper
    incomplete form for p > 1/2, then polishes with two Newton steps.
    """
    if int(r) != r or r < 1:
        raise ValueError(f"degrees of freedom must be an integer >= 1, got {r}")
    p = np.asarray(p, dtype=np.float64)
    if np.isnan(p).any() or (p <= 0).any() or (p >= 1).any():
        raise ValueError("chi2_quantile: p must lie strictly inside (0, 1)")
    a = 0.5 * r
    upper = p > 0.5
    x = np.where(upper, special.gammainccinv(a, np.where(upper, 1.0 - p, 0.5)),
                 special.gammaincinv(a, np.where(upper, 0.5, p)))
    for _ in range(2):
        logpdf = (a - 1.0) * np.log(x) - x - special.gammaln(a)
        resid = np.where(upper, (1.0 - p) - special.gammaincc(a, x), special.gammainc(a, x) - p)
        step = np.where(upper, -resid, resid) / np.exp(logpdf)
        x = np.where(np.isfinite(step), x - step, x)
    q = 2.0 * x
    return float(q) if q.ndim == 0 else q


@dataclasses.dataclass(frozen=True)
class QuadratureSpec:
    relative_tolerance: float = 1e-9
    truncation_quantiles: tuple[float, float] = (1e-12, 1.0 - 1e-12)
    max_panels: int = 4096
    absolute_tolerance: float = 1e-15
    order: int = 10

    def __post_init__(self):
        lo, hi = self.truncation_quantiles
        if not (0.0 < lo < hi < 1.0):
            raise ValueError("truncation quantiles must satisfy 0 < lower < upper < 1")
        if self.relative_tolerance <= 0 or self.max_panels < 1 or self.order < 2:
            raise ValueError("invalid quadrature settings")


class QuadratureError(RuntimeError):
    def __init__(self, message, best, bound):
        super().__init__(message)
        self.best = best
        self.bound = bound


class ChiRule(NamedTuple):
    """Nodes ``z = sqrt(r / W)`` and weights for W ~ chi2_r on the truncated range."""

    z: np.ndarray
    weights: np.ndarray
    lower_tail: float  # mass with W below the lower quantile (z large)
    upper_tail: float  # mass with W above the upper quantile (z small)
    z_edges: tuple[float, float]  # z at the lower / upper truncation points
    panels: int


def _initial_probabilities(lo: float, hi: float) -> np.ndarray:
    k_lo = math.floor(math.log10(lo))
    k_hi = math.floor(math.log10(1.0 - hi))
    left = 10.0 ** np.arange(k_lo + 1, 0)
    right = 1.0 - 10.0 ** np.arange(-1, k_hi, -1)
    mid = np.linspace(0.1, 0.9, 9)
    probs = np.concatenate([[lo], left[left > lo], mid, right[right < hi], [hi]])
    return np.unique(probs)


@functools.lru_cache(maxsize=256)
def chi_rule(r: int, spec: QuadratureSpec = QuadratureSpec(), level: int = 0) -> ChiRule:
    """Composite Gauss--Legendre rule for E[g(sqrt(r/W))], W ~ chi2_r.

    Panels start at chi-square quantiles (decades toward both tails, deciles in
    the bulk) and each is split into ``2**level`` pieces.  Inside a panel the
    nodes are laid out in log W, which keeps the W -> 0 end (z -> infinity)
    resolved for small r.
    """
    lo, hi = spec.truncation_quantiles
    edges_w = chi2_quantile(r, _initial_probabilities(lo, hi))
    s_edges = np.log(edges_w)
    split = 2 ** level
    fine = np.concatenate([
        np.linspace(s_edges[i], s_edges[i + 1], split + 1)[:-1] for i in range(len(s_edges) - 1)
    ] + [[s_edges[-1]]])
    xi, omega = np.polynomial.legendre.leggauss(spec.order)
    half = 0.5 * np.diff(fine)
    mid = 0.5 * (fine[1:] + fine[:-1])
    s = (mid[:, None] + half[:, None] * xi[None, :]).ravel()
    a = 0.5 * r
    log_density = a * s - 0.5 * np.exp(s) - a * math.log(2.0) - special.gammaln(a)
    weights = (half[:, None] * omega[None, :]).ravel() * np.exp(log_density)
    z = np.sqrt(r * np.exp(-s))
    z_edges = (math.sqrt(r / edges_w[0]), math.sqrt(r / edges_w[-1]))
    return ChiRule(z, weights, lo, 1.0 - hi, z_edges, len(half))


def _apply(rule: ChiRule, integrand: Callable) -> tuple[np.ndarray, np.ndarray]:
    g = np.asarray(integrand(rule.z), dtype=np.float64)
    g_lo = np.asarray(integrand(np.array([rule.z_edges[0]])), dtype=np.float64)[0]
    g_hi = np.asarray(integrand(np.array([rule.z_edges[1]])), dtype=np.float64)[0]
    value = np.tensordot(rule.weights, g, axes=(0, 0))
    # tails are filled with the edge value; the bound covers any integrand in [-sup, sup]
    value = value + rule.lower_tail * g_lo + rule.upper_tail * g_hi
    sup = np.maximum(np.max(np.abs(g), axis=0), np.maximum(np.abs(g_lo), np.abs(g_hi)))
    bound = (rule.lower_tail + rule.upper_tail) * sup
    return value, bound


def converge_chi_rule(r: int, integrand: Callable, spec: QuadratureSpec = QuadratureSpec()):
    """Refine ``chi_rule`` levels until successive estimates agree.

    Returns ``(value, bound, level)``.  ``integrand`` maps an array of z nodes
    of shape (n,) to values of shape (n,) or (n, k).
    """
    level = 0
    prev, bound = _apply(chi_rule(r, spec, 0), integrand)
    while True:
        level += 1
        rule = chi_rule(r, spec, level)
        if rule.panels > spec.max_panels:
            raise QuadratureError(
                f"chi-square quadrature did not converge within {spec.max_panels} panels (r={r})",
                prev, bound)
        cur, bound = _apply(rule, integrand)
        diff = np.abs(cur - prev)
        if np.all(diff <= spec.relative_tolerance * np.abs(cur) + spec.absolute_tolerance):
            return cur, bound, level
        prev = cur


def expectation_over_chi(r: int, integrand: Callable, spec: QuadratureSpec = QuadratureSpec(),
                         return_error: bool = False):
    """E[integrand(sqrt(r / W))] for W ~ chi2_r.

    The truncated tail mass is filled with the integrand's value at the
    truncation points; with ``return_error=True`` the pair
    ``(value, error_bound)`` is returned, where the bound is
    tail mass x sup|integrand|.
    """
    if int(r) != r or r < 1:
        raise ValueError(f"degrees of freedom must be an integer >= 1, got {r}")
    value, bound, _ = converge_chi_rule(int(r), integrand, spec)
    if np.ndim(value) == 0:
        value, bound = float(value), float(bound)
    return (value, bound) if return_error else value
