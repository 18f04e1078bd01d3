"""Mean-aggregation operator over closed neighborhoods.

``M[u, v] = 1 / (deg(u) + 1)`` for ``v`` in ``N(u) ∪ {u}``. The kernel update
``vec(X) -> (M ⊗ M) vec(X)`` is carried out as ``M X Mᵀ``; the ``n² × n²``
Kronecker matrix is only built by :func:`kronecker_matrix` for checking.
``M = B C`` with ``B`` the diagonal of inverse closed degrees and ``C`` the
self-looped adjacency, so ``M`` is similar to the symmetric
``S = B^½ C B^½`` and has a real spectrum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DataError, DisconnectedGraphError, NumericalError
from .graph import Graph


@dataclass(frozen=True, eq=False)
class AggregationOperator:
    n: int
    matrix: sp.csr_matrix
    inv_closed_degree: np.ndarray
    closed_adjacency: sp.csr_matrix
    residual_delta: float | None = None
    graph: Graph | None = None

    def dense(self) -> np.ndarray:
        """The effective row-stochastic matrix (``M`` or ``M̃``)."""
        m = self.matrix.toarray()
        if self.residual_delta is not None:
            d = self.residual_delta
            m = (1.0 - d) * m + d * np.eye(self.n)
        return m

    def with_delta(self, delta: float | None) -> "AggregationOperator":
        _check_delta(delta)
        return AggregationOperator(self.n, self.matrix, self.inv_closed_degree,
                                   self.closed_adjacency, delta, self.graph)


@dataclass(frozen=True)
class SpectralSummary:
    lambda1: float
    lambda2: float
    spectral_gap: float
    stationary: np.ndarray
    delta: float | None = None

    def to_json(self) -> dict:
        return {
            "lambda2": float(self.lambda2),
            "gap": float(self.spectral_gap),
            "stationary": [float(x) for x in self.stationary],
            "delta": self.delta,
        }


def _check_delta(delta):
    if delta is not None and not (0.0 < delta < 1.0):
        raise DataError(f"residual delta must lie in (0, 1), got {delta}")


def build_operator(graph: Graph, delta: float | None = None) -> AggregationOperator:
    _check_delta(delta)
    n = graph.node_count
    closed = (graph.adjacency() + sp.identity(n, format="csr")).tocsr()
    inv_deg = 1.0 / (graph.degrees.astype(np.float64) + 1.0)
    m = sp.diags(inv_deg) @ closed
    return AggregationOperator(n, sp.csr_matrix(m), inv_deg, closed, delta, graph)


def apply(op: AggregationOperator, x: np.ndarray) -> np.ndarray:
    """``M X Mᵀ`` (or ``(1-δ) M X Mᵀ + δ X``) for a symmetric ``X``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (op.n, op.n):
        raise DataError(f"matrix shape {x.shape} does not match operator size {op.n}")
    if op.n <= 512:
        md = op.matrix.toarray()
        y = md @ x @ md.T
    else:
        y = op.matrix @ (op.matrix @ x).T
    if op.residual_delta is not None:
        d = op.residual_delta
        y = (1.0 - d) * y + d * x
    return 0.5 * (y + y.T)


def kronecker_matrix(op: AggregationOperator) -> np.ndarray:
    """Explicit ``A = M ⊗ M`` acting on row-major ``vec(X)``; ``n <= 8`` only."""
    if op.n > 8:
        raise DataError("explicit Kronecker matrix is restricted to n <= 8")
    m = op.dense()
    return np.kron(m, m)


def _require_connected(op: AggregationOperator):
    if op.graph is None:
        return
    k, _ = op.graph.components()
    if k != 1:
        raise DisconnectedGraphError(k)


def closed_form_stationary(graph: Graph) -> np.ndarray:
    """Detailed-balance solution ``π_u ∝ deg(u) + 1``."""
    w = graph.degrees.astype(np.float64) + 1.0
    return w / w.sum()


def stationary_distribution(op: AggregationOperator, tol: float = 1e-12,
                            max_iter: int = 1_000_000, check: bool = True) -> np.ndarray:
    """Left fixed vector of the (residual) operator by power iteration.

    The iterate is cross-checked against the closed form ``π ∝ deg + 1``
    when the graph is attached to the operator.
    """
    _require_connected(op)
    mt = op.matrix.T.tocsr()
    d = op.residual_delta
    pi = np.full(op.n, 1.0 / op.n)
    floor = 8 * np.finfo(float).eps * op.n
    prev = np.inf
    for it in range(max_iter):
        nxt = mt @ pi
        if d is not None:
            nxt = (1.0 - d) * nxt + d * pi
        nxt /= nxt.sum()
        step = np.abs(nxt - pi).sum()
        pi = nxt
        if step <= floor:
            break
        # distance to the fixed point ~ step * rho / (1 - rho)
        rho = min(step / prev, 1.0 - 1e-12)
        prev = step
        if it > 2 and step * rho / (1.0 - rho) < tol:
            break
    else:
        raise NumericalError(f"power iteration did not converge in {max_iter} steps "
                             f"(last step {step:.3e})")
    if check and op.graph is not None:
        ref = closed_form_stationary(op.graph)
        err = np.abs(pi - ref).max()
        if err > 1e-8:
            raise NumericalError(f"power iteration disagrees with closed form by {err:.3e}")
    return pi


def spectral_summary(op: AggregationOperator) -> SpectralSummary:
    _require_connected(op)
    b_half = np.sqrt(op.inv_closed_degree)
    s = op.closed_adjacency.toarray() * b_half[:, None] * b_half[None, :]
    if op.residual_delta is not None:
        d = op.residual_delta
        s = (1.0 - d) * s + d * np.eye(op.n)
    evals = np.linalg.eigvalsh(s)[::-1]
    lam1 = float(evals[0])
    lam2 = float(evals[1]) if op.n > 1 else 0.0
    pi = stationary_distribution(op)
    return SpectralSummary(lam1, lam2, 1.0 - lam2, pi, op.residual_delta)
