"""Privacy loss distributions for the subsampled (JL-clipped) Gaussian step.

A :class:`PrivacyLossDistribution` stores the law of the privacy loss
L = log(dAlt/dNull) under the *alternative* hypothesis on the grid
``(origin + k) * grid_spacing``.  The null-side law is recovered as
``exp(-loss) * masses``.  Keeping the alternative side means FFT round-off is
never multiplied by ``exp(loss)`` when delta is evaluated.

Mass is always moved toward larger loss (bins hold the mass of
``(loss - grid_spacing, loss]``, out-of-range mass goes to the bottom bin or
to ``+inf``), so every reported delta is an upper bound.

Directions, with mu = Z / sigma and mixture = (1 - p) N(0, 1) + p N(mu, 1):

* ``REMOVE``: null N(0, 1), alternative the mixture.
* ``ADD``:    null the mixture, alternative N(0, 1).
"""

from __future__ import annotations

import dataclasses
import enum
import math

import numpy as np
from scipy import fft as sp_fft
from scipy import optimize, special

from dpjl.stats import QuadratureSpec, chi_rule, converge_chi_rule
from dpjl.tradeoff import EXACT, TradeoffCurve, _clean, symmetrize

__all__ = [
    "Direction",
    "MechanismSpec",
    "PrivacyLossDistribution",
    "AccountingResult",
    "GridExhaustedError",
    "DEFAULT_DELTA_EPS",
    "DEFAULT_CLAMP",
    "build_pld",
    "compose_pld",
    "delta_at_epsilon",
    "epsilon_for_pld",
    "epsilon_at_delta",
    "account",
    "pld_tradeoff_vertices",
    "composed_privacy_curve",
]

DEFAULT_DELTA_EPS = 1e-4
DEFAULT_CLAMP = 32.0
MAX_CLAMP = 1e18
TAIL_TRUNCATION = 1e-15
_WINDOW_SD = 10.0  # per-node Gaussian window, Phi(-10) ~ 7.6e-24
_MASS_TOL = 1e-9


class Direction(enum.Enum):
    REMOVE = "remove"
    ADD = "add"


class GridExhaustedError(ValueError):
    """Requested delta is below the mass the loss grid can resolve."""

    def __init__(self, message, achievable_delta):
        super().__init__(message)
        self.achievable_delta = achievable_delta


@dataclasses.dataclass(frozen=True)
class MechanismSpec:
    """sigma, JL dimension r (or ``EXACT``), sample rate p = B/N and steps T."""

    sigma: float
    jl_dim: int | None
    sample_rate: float
    steps: int = 1

    def __post_init__(self):
        if not self.sigma > 0 or not math.isfinite(self.sigma):
            raise ValueError("sigma must be a finite number > 0")
        if self.jl_dim is not EXACT and (int(self.jl_dim) != self.jl_dim or self.jl_dim < 1):
            raise ValueError("jl_dim must be a positive integer or EXACT")
        if not 0.0 < self.sample_rate <= 1.0:
            raise ValueError("sample_rate must lie in (0, 1]")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be a positive integer")

    def describe(self) -> str:
        r = "exact" if self.jl_dim is EXACT else str(int(self.jl_dim))
        return f"sigma={self.sigma!r} r={r} p={self.sample_rate!r} T={self.steps}"


@dataclasses.dataclass(frozen=True, eq=False)
class PrivacyLossDistribution:
    grid_spacing: float
    origin: int
    masses: np.ndarray  # law of the loss under the alternative
    mass_at_plus_inf: float
    direction: Direction
    clamp: float = DEFAULT_CLAMP

    def __post_init__(self):
        m = np.ascontiguousarray(self.masses, dtype=np.float64)
        m.setflags(write=False)
        object.__setattr__(self, "masses", m)
        if not self.grid_spacing > 0:
            raise ValueError("grid_spacing must be > 0")
        if m.ndim != 1 or m.size == 0 or np.any(m < 0) or not np.isfinite(m).all():
            raise ValueError("masses must be a nonempty vector of finite nonnegative values")
        total = m.sum() + self.mass_at_plus_inf
        if not (0.0 <= self.mass_at_plus_inf <= 1.0 and abs(total - 1.0) <= _MASS_TOL):
            raise ValueError(f"total mass {total!r} is not 1 within {_MASS_TOL}")

    @property
    def losses(self) -> np.ndarray:
        return (self.origin + np.arange(self.masses.size)) * self.grid_spacing

    def null_masses(self) -> np.ndarray:
        """Null-side law exp(-loss) * masses (may be amplified round-off at very negative loss)."""
        return np.exp(-self.losses) * self.masses

    def mean_loss(self) -> float:
        """Mean loss under the alternative, ignoring mass at +inf."""
        return float(np.dot(self.losses, self.masses) / self.masses.sum())

    def variance_loss(self) -> float:
        mu = self.mean_loss()
        return float(np.dot((self.losses - mu) ** 2, self.masses) / self.masses.sum())


@dataclasses.dataclass(frozen=True)
class AccountingResult:
    epsilon: float
    delta: float
    epsilon_by_direction: dict
    delta_eps_by_direction: dict
    clamp_by_direction: dict
    plds: dict = dataclasses.field(default_factory=dict, repr=False, compare=False)

    def delta_at(self, epsilons) -> np.ndarray:
        """delta(eps) maximized over both directions, from the composed PLDs used for epsilon."""
        eps = np.atleast_1d(np.asarray(epsilons, dtype=np.float64))
        return np.array([max(delta_at_epsilon(pld, e) for pld in self.plds.values()) for e in eps])


# ---------------------------------------------------------------- single step


def _inverse_loss(ell: np.ndarray, mu, p: float) -> np.ndarray:
    """x with log(1 - p + p * exp(mu x - mu^2 / 2)) = ell; -inf below the support."""
    ell = np.asarray(ell, dtype=np.float64)
    if p == 1.0:
        g = ell
    else:
        g = np.empty_like(ell)
        small = ell <= 30.0
        with np.errstate(divide="ignore", invalid="ignore"):
            g[small] = np.log((np.expm1(ell[small]) + p) / p)
            big = ell[~small]
            g[~small] = big - math.log(p) + np.log1p(-(1.0 - p) * np.exp(-big))
        g[np.isnan(g)] = -np.inf
    return (g + 0.5 * mu * mu) / mu


def _loss(x, mu, p: float):
    """log(1 - p + p * exp(mu x - mu^2 / 2))."""
    z = mu * x - 0.5 * mu * mu
    if p == 1.0:
        return z
    return np.logaddexp(math.log1p(-p), math.log(p) + z)


def _cdf_sf(ell: np.ndarray, mu: float, p: float, direction: Direction):
    """CDF and survival of the alternative-side loss at sorted ``ell`` given mu.

    Returns ``(m, F, S)``: F (length m) is the CDF at ``ell[:m]`` and S the
    survival at ``ell[m:]``; the split keeps both away from cancellation.
    """
    if direction is Direction.REMOVE:
        x = _inverse_loss(ell, mu, p)
        m = int(np.searchsorted(x, 0.0, side="left"))
        xl, xh = x[:m], x[m:]
        F = (1.0 - p) * special.ndtr(xl) + p * special.ndtr(xl - mu)
        S = (1.0 - p) * special.ndtr(-xh) + p * special.ndtr(mu - xh)
        return m, F, S
    y = -_inverse_loss(-np.asarray(ell, dtype=np.float64), mu, p)
    m = int(np.searchsorted(y, 0.0, side="left"))
    return m, special.ndtr(y[:m]), special.ndtr(-y[m:])


def _cdf(ell, mu, p, direction) -> np.ndarray:
    m, F, S = _cdf_sf(np.asarray(ell, dtype=np.float64), mu, p, direction)
    return np.concatenate([F, 1.0 - S])


def _sf(ell, mu, p, direction) -> np.ndarray:
    m, F, S = _cdf_sf(np.asarray(ell, dtype=np.float64), mu, p, direction)
    return np.concatenate([1.0 - F, S])


def _node_masses(ell: np.ndarray, mu: float, p: float, direction: Direction):
    """Mass at each edge (the first edge absorbs everything below) and the mass above."""
    m, F, S = _cdf_sf(ell, mu, p, direction)
    mass = np.empty_like(ell)
    # lower part by CDF differences, upper part by survival differences
    if m:
        mass[0] = F[0]
        mass[1:m] = np.diff(F)
    if m < ell.size:
        mass[m] = (1.0 - S[0]) - (F[-1] if m else 0.0)
        mass[m + 1:] = -np.diff(S)
    np.maximum(mass, 0.0, out=mass)
    return mass, float(S[-1]) if m < ell.size else float(1.0 - F[-1])


def _support_window(mu: float, p: float, direction: Direction) -> tuple[float, float]:
    c = _WINDOW_SD
    if direction is Direction.REMOVE:
        return float(_loss(-c, mu, p)), float(_loss(mu + c, mu, p))
    return float(-_loss(c, mu, p)), float(-_loss(-c, mu, p))


def _proxy_points(clamp: float) -> np.ndarray:
    top = min(clamp, 32.0)
    pos = np.geomspace(1e-3, top, 32)
    return np.concatenate([-pos[::-1], [0.0], pos])


def _z_nodes(spec: MechanismSpec, direction: Direction, clamp: float, quad: QuadratureSpec):
    """(z nodes, weights, truncated mass) of the outer expectation over Z_r."""
    if spec.jl_dim is EXACT:
        return np.array([1.0]), np.array([1.0]), 0.0
    r, p, sigma = int(spec.jl_dim), spec.sample_rate, spec.sigma
    pts = _proxy_points(clamp)

    def proxy(z):
        return np.stack([_cdf(pts, zi / sigma, p, direction) for zi in z])

    _, _, level = converge_chi_rule(r, proxy, quad)
    rule = chi_rule(r, quad, level)
    return rule.z, rule.weights, rule.lower_tail + rule.upper_tail


def build_pld(spec: MechanismSpec, direction: Direction = Direction.REMOVE,
              delta_eps: float = DEFAULT_DELTA_EPS, quad: QuadratureSpec = QuadratureSpec(),
              clamp: float = DEFAULT_CLAMP) -> PrivacyLossDistribution:
    """Discretized single-step loss law of one subsampled JL-clipped Gaussian step.

    For every outer node z (mu = z / sigma) the conditional law is binned
    exactly from CDF differences at the grid edges.  Mass outside the node's
    10-sd window is folded into the lowest edge or sent to +inf; truncated
    chi-square tail mass is sent to +inf.
    """
    if not delta_eps > 0 or not clamp > 0:
        raise ValueError("delta_eps and clamp must be > 0")
    direction = Direction(direction)
    half = int(round(clamp / delta_eps))
    origin = -half
    n = 2 * half + 1
    acc = np.zeros(n)
    z, w, inf_mass = _z_nodes(spec, direction, clamp, quad)
    p = spec.sample_rate
    for zi, wi in zip(z, w):
        mu = zi / spec.sigma
        lo, hi = _support_window(mu, p, direction)
        k_lo = int(np.clip(math.ceil(max(lo, -2.0 * clamp) / delta_eps) - origin, 0, n - 1))
        k_hi = int(np.clip(math.ceil(min(hi, 2.0 * clamp) / delta_eps) - origin, 0, n - 1))
        ell = (origin + np.arange(k_lo, k_hi + 1)) * delta_eps
        mass, above = _node_masses(ell, mu, p, direction)
        acc[k_lo:k_hi + 1] += wi * mass
        inf_mass += wi * above
    # quadrature weights sum to the untruncated mass only approximately
    total = acc.sum() + inf_mass
    acc /= total
    inf_mass = min(inf_mass / total, 1.0)
    return PrivacyLossDistribution(delta_eps, origin, acc, inf_mass, direction, clamp)


# ---------------------------------------------------------------- composition


def _fft_convolve(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Linear convolution of a with b (or with itself), negatives from round-off zeroed."""
    nb = a.size if b is None else b.size
    n = a.size + nb - 1
    nfft = sp_fft.next_fast_len(n, real=True)
    fa = sp_fft.rfft(a, nfft)
    prod = fa * fa if b is None else fa * sp_fft.rfft(b, nfft)
    out = sp_fft.irfft(prod, nfft)[:n]
    np.maximum(out, 0.0, out=out)
    return out


def _recenter(masses: np.ndarray, origin: int, inf_mass: float, half: int,
              tail: float) -> tuple[np.ndarray, int, float]:
    """Clamp to [-half, half] bins and drop negligible tails, always toward larger loss."""
    masses = masses.copy()
    # below the clamp: fold into the bottom bin
    k_min = -half - origin
    if k_min > 0:
        masses[k_min] += masses[:k_min].sum()
        masses, origin = masses[k_min:], origin + k_min
    k_max = half - origin
    if k_max < masses.size - 1:
        inf_mass += masses[k_max + 1:].sum()
        masses = masses[:k_max + 1]
    if tail > 0 and masses.size > 1:
        c = np.cumsum(masses)
        first = int(np.searchsorted(c, tail, side="right"))
        if 0 < first < masses.size:
            masses[first] += c[first - 1]
            masses, origin = masses[first:], origin + first
        c = np.cumsum(masses[::-1])
        cut = int(np.searchsorted(c, tail, side="right"))
        if 0 < cut < masses.size:
            inf_mass += c[cut - 1]
            masses = masses[:-cut]
    return masses, origin, min(inf_mass, 1.0)


def _combine(a, b, half: int, tail: float):
    """Loss law of the sum of two independent losses; a/b are (masses, origin, inf)."""
    ma, oa, ia = a
    if b is None:
        m, o, i = _fft_convolve(ma), 2 * oa, ia + ia - ia * ia
    else:
        mb, ob, ib = b
        m, o, i = _fft_convolve(ma, mb), oa + ob, ia + ib - ia * ib
    return _recenter(m, o, i, half, tail)


def compose_pld(pld: PrivacyLossDistribution, steps: int,
                tail: float = TAIL_TRUNCATION) -> PrivacyLossDistribution:
    """T-fold composition by FFT convolution and exponentiation by squaring."""
    if int(steps) != steps or steps < 1:
        raise ValueError("steps must be a positive integer")
    if steps == 1:
        return pld
    half = int(round(pld.clamp / pld.grid_spacing))
    base = (np.asarray(pld.masses), pld.origin, pld.mass_at_plus_inf)
    result = None
    t = int(steps)
    while True:
        if t & 1:
            result = base if result is None else _combine(result, base, half, tail)
        t >>= 1
        if not t:
            break
        base = _combine(base, None, half, tail)
    masses, origin, inf_mass = result
    # zeroed FFT round-off leaves the finite mass off by ~1e-13; restore the total
    masses = masses * ((1.0 - inf_mass) / masses.sum())
    return PrivacyLossDistribution(pld.grid_spacing, origin, masses, inf_mass,
                                   pld.direction, pld.clamp)


# ---------------------------------------------------------------- conversions


def delta_at_epsilon(pld: PrivacyLossDistribution, epsilon: float) -> float:
    """delta(eps) = m_inf + sum_{loss > eps} q(loss) (1 - exp(eps - loss))."""
    if not epsilon >= 0:
        raise ValueError("epsilon must be >= 0")
    if math.isinf(epsilon):
        return float(pld.mass_at_plus_inf)
    ell = pld.losses
    sel = ell > epsilon
    d = pld.mass_at_plus_inf + float(np.dot(pld.masses[sel], -np.expm1(epsilon - ell[sel])))
    return min(max(d, 0.0), 1.0)


def epsilon_for_pld(pld: PrivacyLossDistribution, delta: float) -> float:
    """Smallest eps >= 0 with delta_at_epsilon(pld, eps) <= delta."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if delta_at_epsilon(pld, 0.0) <= delta:
        return 0.0
    top = float(pld.losses[-1])
    if pld.mass_at_plus_inf >= delta or top <= 0:
        raise GridExhaustedError(
            f"delta={delta!r} is below the unresolved mass {pld.mass_at_plus_inf!r}; "
            f"achievable delta range is ({pld.mass_at_plus_inf!r}, 1)", pld.mass_at_plus_inf)
    f = lambda e: delta_at_epsilon(pld, e) - delta  # noqa: E731
    return float(optimize.brentq(f, 0.0, top, xtol=1e-12, rtol=4 * np.finfo(float).eps, maxiter=500))


def _single_step_upper_tail(spec: MechanismSpec, quad: QuadratureSpec, ells: np.ndarray) -> np.ndarray:
    """Rough P_alt[L > ell] for one REMOVE step (level-0 rule, used only to size the grid)."""
    if spec.jl_dim is EXACT:
        z, w, extra = np.array([1.0]), np.array([1.0]), 0.0
    else:
        rule = chi_rule(int(spec.jl_dim), quad, 0)
        z, w, extra = rule.z, rule.weights, rule.lower_tail
    out = np.full(ells.size, extra)
    for zi, wi in zip(z, w):
        out += wi * _sf(ells, zi / spec.sigma, spec.sample_rate, Direction.REMOVE)
    return out


def _initial_clamp(spec: MechanismSpec, delta: float, clamp: float, quad: QuadratureSpec) -> float:
    """Smallest clamp * 4^k whose per-step overflow composes to at most delta / 2."""
    cands = clamp * 4.0 ** np.arange(0, 40)
    cands = cands[cands <= MAX_CLAMP]
    tail = np.clip(_single_step_upper_tail(spec, quad, cands), 0.0, 1.0)
    composed = -np.expm1(spec.steps * np.log1p(-np.minimum(tail, 1.0 - 1e-16)))
    ok = np.nonzero(composed <= 0.5 * delta)[0]
    return float(cands[ok[0]]) if ok.size else float(cands[-1])


def account(spec: MechanismSpec, delta: float, delta_eps: float = DEFAULT_DELTA_EPS,
            quad: QuadratureSpec = QuadratureSpec(), clamp: float = DEFAULT_CLAMP) -> AccountingResult:
    """epsilon for ``delta`` after T steps, maximized over both directions.

    When the composed mass at +inf reaches delta the clamp is widened by 4x,
    scaling delta_eps with it so the bin count stays fixed, up to ``MAX_CLAMP``.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    eps, used_de, used_clamp, plds = {}, {}, {}, {}
    start = _initial_clamp(spec, delta, clamp, quad)
    for direction in (Direction.REMOVE, Direction.ADD):
        c = start if direction is Direction.REMOVE else clamp
        while True:
            de = delta_eps * c / clamp
            composed = compose_pld(build_pld(spec, direction, de, quad, c), spec.steps)
            try:
                eps[direction.value] = epsilon_for_pld(composed, delta)
                used_de[direction.value], used_clamp[direction.value] = de, c
                plds[direction.value] = composed
                break
            except GridExhaustedError as err:
                if c * 4.0 > MAX_CLAMP:
                    raise GridExhaustedError(
                        f"delta={delta!r} unattainable: with loss clamp {c:g} the unresolved "
                        f"mass is {err.achievable_delta!r}; achievable delta range is "
                        f"({err.achievable_delta!r}, 1)", err.achievable_delta) from None
                c *= 4.0
    return AccountingResult(max(eps.values()), delta, eps, used_de, used_clamp, plds)


def epsilon_at_delta(spec: MechanismSpec, delta: float, delta_eps: float = DEFAULT_DELTA_EPS,
                     quad: QuadratureSpec = QuadratureSpec(), clamp: float = DEFAULT_CLAMP) -> float:
    return account(spec, delta, delta_eps, quad, clamp).epsilon


# ---------------------------------------------------------------- tradeoff curves


def pld_tradeoff_vertices(pld: PrivacyLossDistribution, min_loss: float = 0.0):
    """Neyman--Pearson vertices (alpha, beta) for thresholds at atoms >= ``min_loss``.

    Rejecting when L >= loss_j gives alpha_j = sum_{k>=j} exp(-loss_k) q_k and
    beta_j = 1 - m_inf - sum_{k>=j} q_k.  Thresholds at nonnegative losses keep
    exp(-loss) <= 1, so FFT round-off is not amplified.
    """
    ell, q = pld.losses, pld.masses
    keep = (ell >= min_loss) & (q > 0)
    ell, q = ell[keep][::-1], q[keep][::-1]
    alpha = np.concatenate([[0.0], np.cumsum(np.exp(-ell) * q)])
    beta = np.concatenate([[1.0 - pld.mass_at_plus_inf],
                           1.0 - pld.mass_at_plus_inf - np.cumsum(q)])
    return alpha, np.maximum(beta, 0.0)


def composed_privacy_curve(spec: MechanismSpec, delta_eps: float = DEFAULT_DELTA_EPS,
                           quad: QuadratureSpec = QuadratureSpec(),
                           clamp: float = DEFAULT_CLAMP) -> TradeoffCurve:
    """Symmetrized T-step curve min{h, h^-1}** with h the REMOVE-direction curve.

    h is assembled from REMOVE thresholds at nonnegative loss and the swapped
    ADD thresholds at nonnegative loss (the ADD curve is h^-1).
    """
    parts = {}
    for direction in (Direction.REMOVE, Direction.ADD):
        parts[direction] = pld_tradeoff_vertices(
            compose_pld(build_pld(spec, direction, delta_eps, quad, clamp), spec.steps))
    ar, br = parts[Direction.REMOVE]
    aa, ba = parts[Direction.ADD]
    x = np.concatenate([ar, ba])
    y = np.concatenate([br, aa])
    return symmetrize(_clean(x, y, hull=True))
