"""Exact infinite-width GNTK recursion for node-level kernels.

A run starts from ``Σ = Θ = H Hᵀ`` and applies ``L`` propagation units, each
one aggregation followed by ``R`` transformations::

    aggregation      Σ <- M Σ Mᵀ,  Θ <- M Θ Mᵀ        (or the residual mix)
    transformation   Σ <- E_φφ(Σ),  Σ̇ <- E_φ'φ'(Σ),  Θ <- Θ ⊙ Σ̇ + Σ

With ``residual_mlp`` the transformation becomes ``Σ <- Σ + E_φφ(Σ)`` and
``Θ <- Θ ⊙ (Σ̇ + 1) + Σ``.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from . import aggregation as agg
from .diagnostics import ConvergenceTrace, TraceRecorder
from .dual import correlation_map, dual, edge_of_chaos_solve, relu_correlation_map
from .errors import DataError
from .graph import FeatureMatrix, Graph

MAX_DENSE_NODES = 8192


@dataclass(frozen=True)
class GntkConfig:
    activation: str = "relu"
    sigma_w_sq: float = 2.0
    sigma_b_sq: float = 0.0
    R: int = 1
    L: int = 1
    residual_aggregation: float | None = None
    residual_mlp: bool = False
    quadrature_order: int = 40
    quadrature_rule: str = "trapezoid"
    record_trace: bool = False
    trace_sigma: bool = False
    allow_large: bool = False

    def __post_init__(self):
        if self.activation not in ("relu", "tanh"):
            raise DataError(f"activation must be 'relu' or 'tanh', got {self.activation!r}")
        if self.sigma_w_sq <= 0 or self.sigma_b_sq < 0:
            raise DataError("need sigma_w_sq > 0 and sigma_b_sq >= 0")
        if self.R < 1 or self.L < 0:
            raise DataError(f"need R >= 1 and L >= 0, got R={self.R}, L={self.L}")
        d = self.residual_aggregation
        if d is not None and not 0.0 < d < 1.0:
            raise DataError(f"residual_aggregation must lie in (0, 1), got {d}")
        if self.activation == "tanh" and self.quadrature_order < 20:
            raise DataError("quadrature_order must be >= 20")

    @classmethod
    def edge_of_chaos(cls, activation: str = "relu", sigma_b_sq: float = 0.0, **kw):
        """Config on the edge-of-chaos line for ``activation``."""
        eoc = edge_of_chaos_solve(activation, sigma_b_sq)
        return cls(activation=activation, sigma_w_sq=eoc.sigma_w_sq,
                   sigma_b_sq=sigma_b_sq, **kw)

    def replace(self, **kw) -> "GntkConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    def is_relu_eoc(self) -> bool:
        return (self.activation == "relu" and self.sigma_w_sq == 2.0
                and self.sigma_b_sq == 0.0)


@dataclass
class KernelState:
    sigma: np.ndarray
    theta: np.ndarray
    sigma_dot: np.ndarray | None = None
    unit_index: int = 0
    layer_index: int = 0
    clamp_count: int = 0

    @property
    def n(self) -> int:
        return self.sigma.shape[0]

    def correlation(self) -> np.ndarray:
        d = np.sqrt(np.diag(self.sigma))
        return self.sigma / np.outer(d, d)


def init_state(features: FeatureMatrix | np.ndarray) -> KernelState:
    h = features.values if isinstance(features, FeatureMatrix) else np.asarray(
        features, dtype=np.float64)
    if h.ndim != 2 or h.size == 0:
        raise DataError("empty feature matrix")
    gram = h @ h.T
    gram = 0.5 * (gram + gram.T)
    return KernelState(gram, gram.copy())


def aggregate_step(state: KernelState, op: agg.AggregationOperator) -> KernelState:
    if op.n != state.n:
        raise DataError(f"operator size {op.n} != kernel size {state.n}")
    return KernelState(agg.apply(op, state.sigma), agg.apply(op, state.theta),
                       None, state.unit_index + 1, 0, state.clamp_count)


def _dual_matrices(sigma: np.ndarray, config: GntkConfig):
    q = np.diag(sigma).copy()
    if config.activation == "relu":
        res = dual("relu", q[:, None], q[None, :], sigma,
                   config.sigma_w_sq, config.sigma_b_sq)
        return res.e_phi_phi, res.e_dphi_dphi, res.clamp_count
    # tanh quadrature is not symmetric in (u, v): evaluate the upper triangle
    n = len(q)
    iu, ju = np.triu_indices(n)
    res = dual("tanh", q[iu], q[ju], sigma[iu, ju], config.sigma_w_sq,
               config.sigma_b_sq, config.quadrature_order, config.quadrature_rule)
    e_phi = np.empty((n, n))
    e_dphi = np.empty((n, n))
    e_phi[iu, ju] = res.e_phi_phi
    e_phi[ju, iu] = res.e_phi_phi
    e_dphi[iu, ju] = res.e_dphi_dphi
    e_dphi[ju, iu] = res.e_dphi_dphi
    return e_phi, e_dphi, res.clamp_count


def transform_step(state: KernelState, config: GntkConfig) -> KernelState:
    e_phi, e_dphi, clamped = _dual_matrices(state.sigma, config)
    if config.residual_mlp:
        sigma = state.sigma + e_phi
        theta = state.theta * (e_dphi + 1.0) + sigma
    else:
        sigma = e_phi
        theta = state.theta * e_dphi + sigma
    return KernelState(sigma, theta, e_dphi, state.unit_index,
                       state.layer_index + 1, state.clamp_count + clamped)


def _depth(config: GntkConfig, state: KernelState) -> int:
    return config.R * max(state.unit_index - 1, 0) + state.layer_index


def run_gntk(graph: Graph, features: FeatureMatrix | np.ndarray, config: GntkConfig,
             operator: agg.AggregationOperator | Callable[[int], agg.AggregationOperator]
             | None = None, callback=None):
    """Run the full recursion; returns ``(final KernelState, trace or None)``.

    ``operator`` may be a fixed operator or a callable ``l -> operator``
    giving a (possibly resampled) operator for unit ``l``. ``callback`` is
    invoked as ``callback(depth, state)`` after every transformation.
    """
    n = graph.node_count
    h = features.values if isinstance(features, FeatureMatrix) else np.asarray(features)
    if h.shape[0] != n:
        raise DataError(f"feature rows ({h.shape[0]}) != node count ({n})")
    if n > MAX_DENSE_NODES and not config.allow_large:
        raise DataError(f"dense kernels for n={n} > {MAX_DENSE_NODES} need allow_large")
    if operator is None:
        operator = agg.build_operator(graph, config.residual_aggregation)
    get_op = operator if callable(operator) else (lambda _l: operator)

    state = init_state(features)
    recorder = TraceRecorder(with_sigma=config.trace_sigma) if config.record_trace else None
    if recorder is not None:
        recorder.add(0, 0, 0, state.theta, state.sigma)
    for l in range(1, config.L + 1):
        state = aggregate_step(state, get_op(l))
        for _ in range(config.R):
            state = transform_step(state, config)
            d = _depth(config, state)
            if recorder is not None:
                recorder.add(d, state.unit_index, state.layer_index, state.theta, state.sigma)
            if callback is not None:
                callback(d, state)
    return state, (recorder.finish() if recorder is not None else None)


def compute_gntk(graph: Graph, features, config: GntkConfig, operator=None
                 ) -> tuple[np.ndarray, ConvergenceTrace | None]:
    state, trace = run_gntk(graph, features, config, operator)
    return state.theta, trace


def mlp_correlation_trace(c0: float, steps: int, activation: str = "relu",
                          config: GntkConfig | None = None) -> np.ndarray:
    """Correlation trajectory ``C_0..C_steps`` of a pure MLP (no aggregation).

    Without ``config`` the edge-of-chaos point is used (``σ_b² = 0.05`` for
    tanh). The diagonal variance is held at its fixed point ``q*``.
    """
    if not -1.0 <= c0 <= 1.0:
        raise DataError(f"initial correlation must lie in [-1, 1], got {c0}")
    if config is None:
        config = (GntkConfig() if activation == "relu"
                  else GntkConfig.edge_of_chaos("tanh", 0.05, quadrature_order=80))
    out = np.empty(steps + 1)
    out[0] = c = float(c0)
    if activation == "relu":
        for r in range(1, steps + 1):
            c = out[r] = float(relu_correlation_map(c))
        return out
    eoc = edge_of_chaos_solve("tanh", config.sigma_b_sq)
    if eoc.degenerate:
        raise DataError("tanh edge of chaos is degenerate at sigma_b_sq = 0")
    for r in range(1, steps + 1):
        c = out[r] = min(1.0, float(correlation_map(
            "tanh", c, eoc.q_star, config.sigma_w_sq, config.sigma_b_sq,
            config.quadrature_order, config.quadrature_rule)))
    return out


def kernel_metadata(graph: Graph, config: GntkConfig, state: KernelState,
                    wall_time: float | None = None, **extra) -> dict:
    meta = {
        "config": config.to_dict(),
        "graph_hash": graph.content_hash(),
        "node_count": graph.node_count,
        "edge_count": graph.edge_count,
        "depth": config.R * config.L,
        "clamp_count": int(state.clamp_count),
    }
    if wall_time is not None:
        meta["wall_time"] = wall_time
    meta.update(extra)
    return meta


def save_kernel(path, theta: np.ndarray) -> None:
    """Dense text matrix, one row per line, round-trip precision."""
    with open(path, "w") as fh:
        for row in theta:
            fh.write(" ".join(format(float(x), ".17g") for x in row))
            fh.write("\n")


def load_kernel(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, ndmin=2))


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
