"""Tradeoff (type I / type II error) curves and their (epsilon, delta) duals.

A :class:`TradeoffCurve` is the piecewise-linear function through its
vertices ``(alphas[i], betas[i])``.  Vertices need not lie on a common grid;
constructors that sample a smooth curve use :func:`standard_alpha_grid`, which
is uniform in probit space so both ends of [0, 1] are resolved.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy import interpolate, special

from dpjl.stats import QuadratureSpec, converge_chi_rule

__all__ = [
    "EXACT",
    "DEFAULT_GRID_SIZE",
    "GRID_BOUNDARY",
    "TradeoffCurve",
    "EpsDeltaPoint",
    "standard_alpha_grid",
    "identity_curve",
    "gaussian_curve",
    "jl_mechanism_curve",
    "subsample_curve",
    "curve_inverse",
    "symmetrize",
    "fixed_point",
    "eps_delta_from_curve",
    "eps_delta_sweep",
    "lower_convex_hull",
    "monotone_chain_lower_hull",
]

EXACT = None  # jl_dim sentinel: exact per-sample clipping, Z == 1
DEFAULT_GRID_SIZE = 4001
GRID_BOUNDARY = 1e-10
_TOL = 1e-9


@dataclasses.dataclass(frozen=True, eq=False)
class TradeoffCurve:
    alphas: np.ndarray
    betas: np.ndarray

    def __post_init__(self):
        a = np.ascontiguousarray(self.alphas, dtype=np.float64)
        b = np.ascontiguousarray(self.betas, dtype=np.float64)
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "betas", b)
        self.validate()

    def validate(self, tol: float = _TOL):
        a, b = self.alphas, self.betas
        if a.ndim != 1 or a.shape != b.shape or a.size < 2:
            raise ValueError("alphas and betas must be matching 1-d arrays with >= 2 points")
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise ValueError("tradeoff curve contains non-finite values")
        if a[0] != 0.0 or a[-1] != 1.0 or np.any(np.diff(a) <= 0):
            raise ValueError("alphas must increase strictly from 0 to 1")
        if b.min() < -tol or b.max() > 1.0 + tol:
            raise ValueError("betas must lie in [0, 1]")
        if np.any(np.diff(b) > tol):
            raise ValueError("tradeoff curve must be nonincreasing")
        if np.any(b > 1.0 - a + tol):
            raise ValueError("tradeoff curve must lie below Id(alpha) = 1 - alpha")
        # convexity: every vertex lies on or below the chord of its neighbours (checked in value
        # space; slopes over 1e-12-wide cells carry too much rounding to compare directly)
        if a.size > 2:
            w = (a[1:-1] - a[:-2]) / (a[2:] - a[:-2])
            chord = b[:-2] + w * (b[2:] - b[:-2])
            if np.any(b[1:-1] > chord + tol):
                raise ValueError("tradeoff curve must be convex")

    def __len__(self):
        return self.alphas.size

    def __call__(self, alpha):
        return np.interp(alpha, self.alphas, self.betas)

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.betas) / np.diff(self.alphas)


@dataclasses.dataclass(frozen=True)
class EpsDeltaPoint:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")


def standard_alpha_grid(n: int = DEFAULT_GRID_SIZE, boundary: float = GRID_BOUNDARY) -> np.ndarray:
    """0, then n-2 points uniform in probit space over [boundary, 1-boundary], then 1."""
    if n < 3:
        raise ValueError("grid needs at least 3 points")
    x = -special.ndtri(boundary)
    return np.concatenate([[0.0], special.ndtr(np.linspace(-x, x, n - 2)), [1.0]])


def identity_curve(n: int = DEFAULT_GRID_SIZE) -> TradeoffCurve:
    a = standard_alpha_grid(n)
    return TradeoffCurve(a, 1.0 - a)


def gaussian_curve(mu: float, n_points: int = DEFAULT_GRID_SIZE) -> TradeoffCurve:
    """G_mu(alpha) = Phi(Phi^{-1}(1 - alpha) - mu)."""
    if not mu >= 0:
        raise ValueError("mu must be >= 0")
    if mu == 0:
        return identity_curve(n_points)
    a = standard_alpha_grid(n_points)
    inner = a[1:-1]
    b = np.concatenate([[1.0], special.ndtr(-special.ndtri(inner) - mu), [0.0]])
    return TradeoffCurve(a, b)


def monotone_chain_lower_hull(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Andrew's monotone chain over points sorted by strictly increasing x."""
    keep: list[int] = []
    for i in range(x.size):
        while len(keep) >= 2:
            o, a = keep[-2], keep[-1]
            cross = (x[a] - x[o]) * (y[i] - y[o]) - (y[a] - y[o]) * (x[i] - x[o])
            if cross <= 0:
                keep.pop()
            else:
                break
        keep.append(i)
    idx = np.asarray(keep)
    return x[idx], y[idx]


def lower_convex_hull(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vertices of the lower convex hull of points sorted by strictly increasing x.

    A point on or above the chord between two other points (one on each side)
    is never a strict hull vertex, so two vectorized passes over chords of
    index span 1, 2, 4, ... first discard the bulk of such points; the exact
    monotone chain then runs on the survivors.
    """
    idx = np.arange(x.size)
    for _ in range(2):
        if idx.size <= 2:
            break
        xs, ys = x[idx], y[idx]
        drop = np.zeros(idx.size, dtype=bool)
        span = 1
        while 2 * span < idx.size:
            xo, xa, xb = xs[:-2 * span], xs[span:-span], xs[2 * span:]
            yo, ya, yb = ys[:-2 * span], ys[span:-span], ys[2 * span:]
            cross = (xa - xo) * (yb - yo) - (ya - yo) * (xb - xo)
            drop[span:-span] |= cross <= 0
            span *= 2
        if not drop.any():
            break
        idx = idx[~drop]
    hx, hy = monotone_chain_lower_hull(x[idx], y[idx])
    return hx, hy


def _dedupe_min(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort by x; where x repeats keep the smallest y."""
    order = np.lexsort((y, x))
    x, y = x[order], y[order]
    first = np.concatenate([[True], np.diff(x) > 0])
    return x[first], y[first]


def _clean(x: np.ndarray, y: np.ndarray, hull: bool = True) -> TradeoffCurve:
    x, y = _dedupe_min(np.clip(x, 0.0, 1.0), np.clip(y, 0.0, 1.0))
    if x[0] > 0.0:
        x, y = np.concatenate([[0.0], x]), np.concatenate([[1.0], y])
    if x[-1] < 1.0:
        x, y = np.concatenate([x, [1.0]]), np.concatenate([y, [0.0]])
    y = np.minimum(y, 1.0 - x)
    if hull:
        x, y = lower_convex_hull(x, y)
    return TradeoffCurve(x, y)


def _smooth_interp(xq: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Interpolate a smooth decreasing curve in probit coordinates.

    A monotone cubic (PCHIP) through the probit-probit points; Gaussian
    tradeoff curves are straight lines there.  Queries outside the interior
    points (next to alpha or beta equal to 0 or 1) fall back to linear
    interpolation.
    """
    out = np.interp(xq, xs, ys)
    inside = lambda v: (v > 0.0) & (v < 1.0)  # noqa: E731
    ok = inside(xs) & inside(ys)
    px, first = np.unique(special.ndtri(xs[ok]), return_index=True)
    py = special.ndtri(ys[ok][first])
    if px.size < 2:
        return out
    q = inside(xq) & (xq >= xs[ok][0]) & (xq <= xs[ok][-1])
    pq = special.ndtri(xq[q])
    spline = interpolate.PchipInterpolator(px, py, extrapolate=False)
    val = special.ndtr(spline(np.clip(pq, px[0], px[-1])))
    out[q] = np.where(np.isfinite(val), val, out[q])
    return out


def curve_inverse(f: TradeoffCurve, n_points: int = DEFAULT_GRID_SIZE,
                  regrid: bool = True) -> TradeoffCurve:
    """f^{-1}: the tradeoff curve with the roles of the two hypotheses swapped.

    With ``regrid`` the swapped curve is resampled onto the standard grid
    (probit interpolation); otherwise the swapped vertices are returned, which
    is the exact inverse of the piecewise-linear curve.
    """
    x, y = _dedupe_min(f.betas[::-1].copy(), f.alphas[::-1].copy())
    if x[0] > 0.0:  # f(1) > 0: nothing reaches beta below f(1)
        x, y = np.concatenate([[0.0], x]), np.concatenate([[1.0], y])
    if x[-1] < 1.0:  # f(0) < 1: the inverse is 0 beyond f(0)
        x, y = np.concatenate([x, [1.0]]), np.concatenate([y, [0.0]])
    if not regrid:
        return _clean(x, y, hull=False)
    grid = standard_alpha_grid(n_points)
    return _clean(grid, _smooth_interp(grid, x, y))


def subsample_curve(f: TradeoffCurve, p: float) -> TradeoffCurve:
    """p * f + (1 - p) * Id on f's vertices."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("sample rate must lie in [0, 1]")
    if p == 1.0:
        return f
    if p == 0.0:
        return TradeoffCurve(f.alphas, 1.0 - f.alphas)
    return TradeoffCurve(f.alphas, p * f.betas + (1.0 - p) * (1.0 - f.alphas))


def _pointwise_min(f: TradeoffCurve, g: TradeoffCurve) -> tuple[np.ndarray, np.ndarray]:
    """Vertices of min(f, g) for piecewise-linear f, g, including crossings."""
    x = np.union1d(f.alphas, g.alphas)
    d = f(x) - g(x)
    y = np.minimum(f(x), g(x))
    cross = np.nonzero(d[:-1] * d[1:] < 0)[0]
    if cross.size:
        t = d[cross] / (d[cross] - d[cross + 1])
        xc = x[cross] + t * (x[cross + 1] - x[cross])
        yc = f(xc)
        x, y = np.concatenate([x, xc]), np.concatenate([y, yc])
    return x, y


def symmetrize(f: TradeoffCurve) -> TradeoffCurve:
    """min{f, f^{-1}}**: lower convex envelope of the pointwise minimum.

    The inverse is the exact vertex swap, so the result's vertex set is closed
    under swapping and a second application returns it unchanged.
    """
    x, y = _pointwise_min(f, curve_inverse(f, regrid=False))
    return _clean(x, y, hull=True)


def fixed_point(f: TradeoffCurve, tol: float = 1e-15) -> float:
    """alpha* with f(alpha*) = alpha*, by bisection."""
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) > mid:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def eps_delta_from_curve(f: TradeoffCurve, alpha: float) -> EpsDeltaPoint:
    """(epsilon, delta) of the supporting line through the segment right of alpha."""
    a_star = fixed_point(f)
    if not 0.0 <= alpha <= a_star:
        raise ValueError(f"alpha={alpha} lies outside [0, alpha*={a_star}]")
    i = min(int(np.searchsorted(f.alphas, alpha, side="right")) - 1, f.alphas.size - 2)
    slope = (f.betas[i + 1] - f.betas[i]) / (f.alphas[i + 1] - f.alphas[i])
    if slope >= 0:
        raise ValueError(f"non-negative slope at alpha={alpha}: no (epsilon, delta) guarantee")
    eps = max(math.log(-slope), 0.0)
    delta = 1.0 - float(f(alpha)) + alpha * slope
    return EpsDeltaPoint(eps, min(max(delta, 0.0), 1.0))


def eps_delta_sweep(f: TradeoffCurve) -> tuple[np.ndarray, np.ndarray]:
    """(epsilon, delta) for every vertex alpha in [0, alpha*) with a negative slope."""
    a_star = fixed_point(f)
    slopes = f.slopes
    idx = np.nonzero((f.alphas[:-1] <= a_star) & (slopes < -1.0))[0]
    eps = np.log(-slopes[idx])
    delta = 1.0 - f.betas[idx] + f.alphas[idx] * slopes[idx]
    return eps, np.clip(delta, 0.0, 1.0)


def jl_mechanism_curve(sigma: float, jl_dim: int | None,
                       quad: QuadratureSpec = QuadratureSpec(),
                       n_points: int = DEFAULT_GRID_SIZE) -> TradeoffCurve:
    """Tradeoff curve of one JL-clipped Gaussian step.

    With Z = 1 / sqrt(chi2_r / r) and mu = Z / sigma, each threshold t gives
    alpha(t) = E[Phi(-t/mu - mu/2)] and beta(t) = E[Phi(t/mu - mu/2)].
    ``jl_dim=EXACT`` uses Z = 1, i.e. the Gaussian curve with mu = 1/sigma.
    Since alpha(-t) = beta(t) the curve is symmetric; thresholds t >= 0 are
    placed so that both coordinates land close to the standard grid, and the
    vertices are mirrored.
    """
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    grid = standard_alpha_grid(n_points)
    target = special.ndtri(grid[1:-1])  # probit of target alphas
    if jl_dim is EXACT:
        mu = 1.0 / sigma
        t = np.union1d(mu * (-target - mu / 2.0), [0.0])
        alpha = special.ndtr(-t / mu - mu / 2.0)
        beta = special.ndtr(t / mu - mu / 2.0)
    else:
        if int(jl_dim) != jl_dim or jl_dim < 1:
            raise ValueError("jl_dim must be a positive integer or EXACT")
        r = int(jl_dim)
        # alpha(t) <= Phi(-sqrt(2t)), so t <= 30 reaches the grid boundary; for heavy-tailed
        # Z (small r) beta(30) stays below 1 and the corner is spanned by a chord
        t_min = 1e-6 * min(1.0, 1.0 / sigma**2)
        pilot = np.concatenate([[0.0], np.geomspace(t_min, 30.0, 1500)])

        def both(tt):
            def g(z):
                mu = z[:, None] / sigma
                return np.concatenate([special.ndtr(-tt[None, :] / mu - mu / 2.0),
                                       special.ndtr(tt[None, :] / mu - mu / 2.0)], axis=1)
            return g

        vals, _, _ = converge_chi_rule(r, both(pilot), quad)
        a_pilot, b_pilot = vals[: pilot.size], vals[pilot.size:]
        t = [np.array([0.0])]
        for v, sign in ((a_pilot, -1.0), (b_pilot, 1.0)):
            # probit(v) is monotone in t; interpolate t at reachable targets
            ok = (v > 0) & (v < 1)
            pv, first = np.unique(sign * special.ndtri(v[ok]), return_index=True)
            tv = pilot[ok][first]
            want = sign * target
            want = want[(want >= pv[0]) & (want <= pv[-1])]
            t.append(np.interp(want, pv, tv))
        t = np.unique(np.concatenate(t))
        vals, _, _ = converge_chi_rule(r, both(t), quad)
        a_half, b_half = vals[: t.size], vals[t.size:]
        alpha = np.concatenate([a_half, b_half])
        beta = np.concatenate([b_half, a_half])
    order = np.argsort(alpha, kind="stable")
    x = np.concatenate([[0.0], alpha[order], [1.0]])
    y = np.concatenate([[1.0], beta[order], [0.0]])
    return _clean(x, y, hull=True)
