"""Bivariate Gaussian expectations of activations and the edge of chaos.

For a pair ``(z1, z2)`` with covariance ``[[q_u, s], [s, q_v]]`` the
transformation step needs

    e_phi_phi   = σ_w² E[φ(z1) φ(z2)]   + σ_b²
    e_dphi_dphi = σ_w² E[φ'(z1) φ'(z2)] + σ_b²

ReLU uses the arc-cosine closed form; tanh uses a product quadrature rule
over ``z2 = c z1 + sqrt(1 - c²) z`` with ``c = s / sqrt(q_u q_v)``.

Two node families are available. ``"trapezoid"`` (default) is the
Gaussian-weighted trapezoidal rule on ``[-T, T]``; because tanh is analytic in
a strip its error falls geometrically in the node count, whereas
``"hermite"`` (Gauss-Hermite) only converges like ``exp(-a sqrt(order))``
for integrands with poles at distance ``a`` from the real axis.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DataError, NumericalError

CLAMP_TOL = 1e-10
_CHUNK = 1 << 22  # quadrature evaluations per vectorized block


@dataclass(frozen=True)
class DualActivationResult:
    e_phi_phi: np.ndarray
    e_dphi_dphi: np.ndarray
    clamp_count: int = 0


RULES = ("trapezoid", "hermite")


@functools.lru_cache(maxsize=None)
def gauss_hermite(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Hermite nodes and weights for expectations under ``N(0, 1)``."""
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / np.sqrt(2.0 * np.pi)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def trapezoid_half_width(order: int, q_max: float = 1.0) -> float:
    """Half-width ``T`` of the trapezoidal rule for tanh-type integrands.

    The truncated tail costs about ``exp(-T²/2)`` and the discretization about
    ``exp(-2π a / h)`` with ``h = 2T/(order-1)``, where ``a ≈ 1.15 π/(2√q)``
    is the effective distance of tanh's poles from the real axis. Equating
    the two gives ``T³ = π a (order-1)``.
    """
    a = 1.15 * np.pi / (2.0 * np.sqrt(max(q_max, 1e-12)))
    t = (np.pi * a * (order - 1)) ** (1.0 / 3.0)
    return float(min(10.0, max(3.0, round(t * 20.0) / 20.0)))


@functools.lru_cache(maxsize=None)
def gaussian_trapezoid(order: int, half: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Trapezoidal nodes on ``[-T, T]`` weighted by the standard normal density.

    ``half`` defaults to :func:`trapezoid_half_width` at ``q = 1``.
    """
    if half is None:
        half = trapezoid_half_width(order)
    x = np.linspace(-half, half, order)
    w = np.exp(-0.5 * x * x) * (x[1] - x[0]) / np.sqrt(2.0 * np.pi)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gaussian_rule(order: int, rule: str = "trapezoid", q_max: float = 1.0):
    if rule == "trapezoid":
        return gaussian_trapezoid(order, trapezoid_half_width(order, q_max))
    if rule == "hermite":
        return gauss_hermite(order)
    raise DataError(f"unknown quadrature rule {rule!r}; choose from {RULES}")


def gaussian_expectation(fn, q: float, order: int = 201, rule: str = "trapezoid") -> float:
    """``∫ Dz fn(sqrt(q) z)``."""
    x, w = gaussian_rule(order, rule, q)
    return float(w @ fn(np.sqrt(q) * x))


def _correlation(q_u, q_v, s):
    q_u = np.asarray(q_u, dtype=np.float64)
    q_v = np.asarray(q_v, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if np.any(q_u <= 0) or np.any(q_v <= 0):
        raise DataError("variances must be positive")
    scale = np.sqrt(q_u * q_v)
    c = s / scale
    over = np.abs(c) > 1.0
    if np.any(np.abs(c) > 1.0 + CLAMP_TOL):
        worst = float(np.abs(c).max())
        raise NumericalError(f"correlation {worst!r} outside [-1, 1] beyond clamp "
                             "tolerance; upstream kernel is corrupted")
    return scale, np.clip(c, -1.0, 1.0), int(np.count_nonzero(over))


def relu_correlation_map(c):
    """Edge-of-chaos ReLU correlation map ``f`` (with ``σ_w² = 2``).

    ``f(c) = (2c arcsin c + 2 sqrt(1-c²) + cπ) / 2π``, evaluated as
    ``c + (sin θ - θ c) / π`` with ``θ = arccos c`` so that the two terms
    with unbounded slope at ``c = 1`` do not cancel numerically.
    """
    c = np.clip(np.asarray(c, dtype=np.float64), -1.0, 1.0)
    t = np.arccos(c)
    return c + (np.sin(t) - t * c) / np.pi


def relu_correlation_slope(c):
    """``f'(c) = arcsin(c) / π + 1/2 = 1 - arccos(c) / π``."""
    c = np.clip(np.asarray(c, dtype=np.float64), -1.0, 1.0)
    return 1.0 - np.arccos(c) / np.pi


def relu_dual(q_u, q_v, s, sigma_w_sq: float = 2.0, sigma_b_sq: float = 0.0
              ) -> DualActivationResult:
    scale, c, clamped = _correlation(q_u, q_v, s)
    half = 0.5 * sigma_w_sq
    return DualActivationResult(
        half * scale * relu_correlation_map(c) + sigma_b_sq,
        half * relu_correlation_slope(c) + sigma_b_sq,
        clamped,
    )


def _tanh(x):
    return np.tanh(x)


def _dtanh(x):
    t = np.tanh(x)
    return 1.0 - t * t


def _d2tanh(x):
    t = np.tanh(x)
    return -2.0 * t * (1.0 - t * t)


def _bivariate(fn, su, sv, c, order, rule):
    """``E[fn(su z1) fn(sv (c z1 + sqrt(1-c²) z2))]`` elementwise, flat inputs."""
    out = np.empty(len(c))
    if rule == "trapezoid":
        # elements sharing a half-width share one node set
        q_max = np.maximum(su, sv) ** 2
        halves = np.array([trapezoid_half_width(order, q) for q in np.unique(q_max)])
        key = np.searchsorted(np.unique(q_max), q_max)
        groups = [(halves[k], np.flatnonzero(key == k)) for k in range(len(halves))]
        merged = {}
        for half, idx in groups:
            merged.setdefault(half, []).append(idx)
        groups = [(h, np.concatenate(ix)) for h, ix in merged.items()]
    else:
        groups = [(None, np.arange(len(c)))]
    for half, idx in groups:
        if rule == "trapezoid":
            x, w = gaussian_trapezoid(order, half)
        else:
            x, w = gauss_hermite(order)
        out[idx] = _bivariate_block(fn, su[idx], sv[idx], c[idx], x, w)
    return out


def _bivariate_block(fn, su, sv, c, x, w):
    order = len(x)
    out = np.empty(len(c))
    step = max(1, _CHUNK // (order * order))
    for lo in range(0, len(c), step):
        sl = slice(lo, lo + step)
        cc = c[sl, None, None]
        ss = np.sqrt(np.maximum(1.0 - cc * cc, 0.0))
        a = fn(su[sl, None] * x[None, :])                                   # (k, i)
        b = fn(sv[sl, None, None] * (cc * x[None, :, None] + ss * x[None, None, :]))
        inner = b @ w                                                       # (k, i)
        out[sl] = (a * inner) @ w
    return out


def tanh_dual(q_u, q_v, s, order: int = 40, sigma_w_sq: float = 1.0,
              sigma_b_sq: float = 0.0, rule: str = "trapezoid") -> DualActivationResult:
    if order < 20:
        raise DataError(f"quadrature order must be >= 20, got {order}")
    scale, c, clamped = _correlation(q_u, q_v, s)
    shape = c.shape
    qu = np.broadcast_to(np.asarray(q_u, dtype=np.float64), shape).ravel()
    qv = np.broadcast_to(np.asarray(q_v, dtype=np.float64), shape).ravel()
    # the product rule is not exactly symmetric in (u, v): fix an order
    swap = qu < qv
    qu, qv = np.where(swap, qv, qu), np.where(swap, qu, qv)
    su, sv, cf = np.sqrt(qu), np.sqrt(qv), c.ravel()
    e_phi = _bivariate(_tanh, su, sv, cf, order, rule).reshape(shape)
    e_dphi = _bivariate(_dtanh, su, sv, cf, order, rule).reshape(shape)
    return DualActivationResult(sigma_w_sq * e_phi + sigma_b_sq,
                                sigma_w_sq * e_dphi + sigma_b_sq, clamped)


def dual(activation: str, q_u, q_v, s, sigma_w_sq: float, sigma_b_sq: float,
         order: int = 40, rule: str = "trapezoid") -> DualActivationResult:
    if activation == "relu":
        return relu_dual(q_u, q_v, s, sigma_w_sq, sigma_b_sq)
    if activation == "tanh":
        return tanh_dual(q_u, q_v, s, order, sigma_w_sq, sigma_b_sq, rule)
    raise DataError(f"unknown activation {activation!r}")


# ------------------------------------------------------------ edge of chaos

class EdgeOfChaos(NamedTuple):
    sigma_w_sq: float
    q_star: float
    chi_residual: float = 0.0
    q_residual: float = 0.0
    degenerate: bool = False


def variance_fixed_point(activation: str, sigma_w_sq: float, sigma_b_sq: float,
                         q0: float = 1.0, tol: float = 1e-12, max_iter: int = 200_000,
                         order: int = 201) -> float:
    """Fixed point of ``q -> σ_w² ∫Dz φ(√q z)² + σ_b²`` by direct iteration."""
    if activation == "relu":
        if sigma_b_sq == 0.0 and sigma_w_sq == 2.0:
            return q0
        if sigma_w_sq < 2.0:
            return sigma_b_sq / (1.0 - sigma_w_sq / 2.0)
        raise NumericalError("ReLU variance map has no finite fixed point "
                             f"for sigma_w_sq={sigma_w_sq}, sigma_b_sq={sigma_b_sq}")
    q = q0
    for _ in range(max_iter):
        nxt = sigma_w_sq * gaussian_expectation(lambda z: _tanh(z) ** 2, q, order) + sigma_b_sq
        if abs(nxt - q) < tol:
            return nxt
        q = nxt
    raise NumericalError(f"variance fixed point did not converge (last step {abs(nxt - q):.3e})")


def chi(activation: str, sigma_w_sq: float, q: float, order: int = 201) -> float:
    """Slope of the correlation map at ``c = 1``: ``σ_w² ∫Dz φ'(√q z)²``."""
    if activation == "relu":
        return sigma_w_sq / 2.0
    return sigma_w_sq * gaussian_expectation(lambda z: _dtanh(z) ** 2, q, order)


def edge_of_chaos_solve(activation: str, sigma_b_sq: float, q0: float = 1.0,
                        tol: float = 1e-10, order: int = 201,
                        max_bisect: int = 200) -> EdgeOfChaos:
    """Solve ``σ_w² ∫Dz φ'(√q* z)² = 1`` jointly with the variance fixed point.

    ReLU has the fixed answer ``(2, q0)`` with ``σ_b² = 0``. For tanh, the
    outer loop bisects on ``σ_w²`` and the inner loop iterates ``q*``. At
    ``σ_b² = 0`` the tanh solution degenerates to ``(1, 0)`` and is
    flagged.
    """
    if activation == "relu":
        if sigma_b_sq != 0.0:
            raise DataError("ReLU edge of chaos requires sigma_b_sq = 0")
        return EdgeOfChaos(2.0, float(q0))
    if activation != "tanh":
        raise DataError(f"unknown activation {activation!r}")
    if sigma_b_sq < 0:
        raise DataError("sigma_b_sq must be non-negative")
    if sigma_b_sq == 0.0:
        return EdgeOfChaos(1.0, 0.0, degenerate=True)

    def residual(sw):
        q = variance_fixed_point("tanh", sw, sigma_b_sq, q0=q0, order=order)
        return chi("tanh", sw, q, order) - 1.0, q

    lo, hi = 1.0, 2.0
    r_lo, _ = residual(lo)
    if r_lo >= 0:
        raise NumericalError(f"chi(1) - 1 = {r_lo:.3e} >= 0; no bracket")
    r_hi, _ = residual(hi)
    while r_hi < 0:
        hi *= 2.0
        if hi > 1e4:
            raise NumericalError("could not bracket the edge of chaos")
        r_hi, _ = residual(hi)
    for _ in range(max_bisect):
        mid = 0.5 * (lo + hi)
        r_mid, _ = residual(mid)
        if r_mid < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    else:
        raise NumericalError(f"bisection did not converge: bracket [{lo}, {hi}]")
    sw = 0.5 * (lo + hi)
    r, q = residual(sw)
    q_res = sigma_w_sq_map("tanh", sw, sigma_b_sq, q, order) - q
    return EdgeOfChaos(sw, q, abs(r), abs(q_res))


def sigma_w_sq_map(activation, sigma_w_sq, sigma_b_sq, q, order=201):
    """One application of the diagonal variance map."""
    if activation == "relu":
        return sigma_w_sq / 2.0 * q + sigma_b_sq
    return sigma_w_sq * gaussian_expectation(lambda z: _tanh(z) ** 2, q, order) + sigma_b_sq


def correlation_map(activation: str, c, q: float, sigma_w_sq: float,
                    sigma_b_sq: float, order: int = 80, rule: str = "trapezoid"):
    """Pure-MLP correlation update at a fixed diagonal variance ``q``."""
    c = np.asarray(c, dtype=np.float64)
    if activation == "relu":
        res = relu_dual(q, q, c * q, sigma_w_sq, sigma_b_sq)
    else:
        res = tanh_dual(q, q, c * q, order, sigma_w_sq, sigma_b_sq, rule)
    return res.e_phi_phi / q


def beta_tanh(sigma_w_sq: float, q_star: float, order: int = 201) -> float:
    """Asymptotic constant in ``1 - C_r ~ β / r``:
    ``2 ∫Dz φ'(√q z)² / (q ∫Dz φ''(√q z)²)``.
    """
    num = gaussian_expectation(lambda z: _dtanh(z) ** 2, q_star, order)
    den = gaussian_expectation(lambda z: _d2tanh(z) ** 2, q_star, order)
    return 2.0 * num / (q_star * den)
