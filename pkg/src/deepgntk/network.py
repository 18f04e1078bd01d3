"""Finite-width GCN in NTK parameterization with a hand-written backward pass.

Layout (rows are nodes)::

    z0 = H W0ᵀ                                   linear embedding, no scaling
    unit l, layer r:  a = M z (r = 1) or z (r > 1)
                      z = (σ_w / √m_in) φ(a) Wᵀ + σ_b b

The embedding has covariance ``H Hᵀ`` at initialization, so the network's
tangent kernel averaged over the final coordinates converges to the
GNTK recursion started from ``Σ = Θ = H Hᵀ``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .aggregation import build_operator
from .errors import DataError, NumericalError
from .graph import DatasetSplit, FeatureMatrix, Graph, LabelVector
from .sampling import SampleConfig, sample_edges

MAX_WIDTH = 4096
_CHUNK_BYTES = 1 << 28
DIVERGENCE_LOSS = 1e6


@dataclass(frozen=True)
class NetConfig:
    activation: str = "relu"
    sigma_w_sq: float = 2.0
    sigma_b_sq: float = 0.0
    R: int = 1
    L: int = 1
    aggregation: str = "mean"

    def __post_init__(self):
        if self.activation not in ("relu", "tanh"):
            raise DataError(f"unknown activation {self.activation!r}")
        if self.aggregation not in ("mean", "sym"):
            raise DataError(f"aggregation must be 'mean' or 'sym', got {self.aggregation!r}")
        if self.R < 1 or self.L < 0:
            raise DataError("need R >= 1 and L >= 0")

    @classmethod
    def from_gntk(cls, cfg, **kw):
        base = dict(activation=cfg.activation, sigma_w_sq=cfg.sigma_w_sq,
                    sigma_b_sq=cfg.sigma_b_sq, R=cfg.R, L=cfg.L)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return dict(activation=self.activation, sigma_w_sq=self.sigma_w_sq,
                    sigma_b_sq=self.sigma_b_sq, R=self.R, L=self.L,
                    aggregation=self.aggregation)


def phi(activation, x):
    return np.maximum(x, 0.0) if activation == "relu" else np.tanh(x)


def dphi(activation, x):
    if activation == "relu":
        return (x > 0).astype(np.float64)
    t = np.tanh(x)
    return 1.0 - t * t


def aggregation_matrix(graph: Graph, kind: str = "mean", dense: bool | None = None):
    """Propagation matrix; dense by default for ``n <= 2048``."""
    if kind == "mean":
        m = build_operator(graph).matrix
    else:
        closed = graph.adjacency() + sp.identity(graph.node_count, format="csr")
        d = 1.0 / np.sqrt(graph.degrees + 1.0)
        m = sp.csr_matrix(sp.diags(d) @ closed @ sp.diags(d))
    if dense is None:
        dense = graph.node_count <= 2048
    return m.toarray() if dense else sp.csr_matrix(m)


# ---------------------------------------------------------------------------
# parameters

@dataclass
class GcnParams:
    embed: np.ndarray                      # (m, d)
    weights: list = field(default_factory=list)   # per layer (m_out, m_in)
    biases: list = field(default_factory=list)    # per layer (m_out,)
    width: int = 0
    R: int = 1

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def arrays(self):
        return [self.embed, *self.weights, *self.biases]

    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "GcnParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(vec[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        k = self.num_layers
        return GcnParams(out[0], out[1:1 + k], out[1 + k:], self.width, self.R)

    def copy(self) -> "GcnParams":
        return self.with_flat(self.flat())


def init_params(in_dim: int, width: int, L: int, R: int = 1, out_dim: int | None = None,
                rng: np.random.Generator | None = None, seed=None,
                allow_wide: bool = False) -> GcnParams:
    """Standard normal entries; the last layer maps to ``out_dim`` (default ``width``)."""
    if width < 1:
        raise DataError("width must be positive")
    if width > MAX_WIDTH and not allow_wide:
        raise DataError(f"width {width} exceeds {MAX_WIDTH}; pass allow_wide to override")
    rng = np.random.default_rng(seed) if rng is None else rng
    out_dim = width if out_dim is None else out_dim
    embed = rng.standard_normal((width, in_dim))
    weights, biases = [], []
    k = L * R
    for layer in range(k):
        m_out = out_dim if layer == k - 1 else width
        weights.append(rng.standard_normal((m_out, width)))
        biases.append(rng.standard_normal(m_out))
    return GcnParams(embed, weights, biases, width, R)


# ---------------------------------------------------------------------------
# forward / backward

@dataclass
class ForwardCache:
    pre: list          # z_0..z_K
    act_in: list       # a_k fed to φ at layer k (k = 1..K)
    post: list         # φ(a_k)

    @property
    def output(self):
        return self.pre[-1]


def _unit_matrix(m_agg, layer: int, R: int):
    """``m_agg`` is one matrix for every unit or a sequence with one per unit."""
    if isinstance(m_agg, (list, tuple)):
        return m_agg[layer // R]
    return m_agg


def forward(m_agg, features, params: GcnParams, config: NetConfig) -> ForwardCache:
    h = features.values if isinstance(features, FeatureMatrix) else np.asarray(features)
    if h.shape[1] != params.embed.shape[1]:
        raise DataError(f"feature dim {h.shape[1]} != embedding input {params.embed.shape[1]}")
    mats = m_agg if isinstance(m_agg, (list, tuple)) else [m_agg]
    if any(m.shape[0] != h.shape[0] for m in mats):
        raise DataError("aggregation matrix does not match node count")
    if isinstance(m_agg, (list, tuple)) and len(m_agg) * params.R < params.num_layers:
        raise DataError("need one aggregation matrix per propagation unit")
    sw, sb = np.sqrt(config.sigma_w_sq), np.sqrt(config.sigma_b_sq)
    z = h @ params.embed.T
    pre, act_in, post = [z], [], []
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = _unit_matrix(m_agg, k, params.R) @ z if k % params.R == 0 else z
        x = phi(config.activation, a)
        z = (sw / np.sqrt(w.shape[1])) * (x @ w.T) + sb * b
        act_in.append(a)
        post.append(x)
        pre.append(z)
    return ForwardCache(pre, act_in, post)


def backward(m_agg, features, params: GcnParams, config: NetConfig, cache: ForwardCache,
             grad_out: np.ndarray) -> GcnParams:
    """Parameter gradients of ``sum(grad_out * output)``."""
    h = features.values if isinstance(features, FeatureMatrix) else np.asarray(features)
    sw, sb = np.sqrt(config.sigma_w_sq), np.sqrt(config.sigma_b_sq)
    k = params.num_layers
    gw, gb = [None] * k, [None] * k
    dz = grad_out
    for layer in range(k - 1, -1, -1):
        w = params.weights[layer]
        s = sw / np.sqrt(w.shape[1])
        gw[layer] = s * (dz.T @ cache.post[layer])
        gb[layer] = sb * dz.sum(axis=0)
        da = (s * (dz @ w)) * dphi(config.activation, cache.act_in[layer])
        dz = _unit_matrix(m_agg, layer, params.R).T @ da if layer % params.R == 0 else da
    g_embed = dz.T @ h
    return GcnParams(g_embed, gw, gb, params.width, params.R)


def grad_check(graph: Graph, features, params: GcnParams, config: NetConfig,
               num_entries: int = 200, step: float = 1e-5, seed: int = 0,
               m_agg=None) -> float:
    """Max relative error between backprop and central differences.

    The scalar is a fixed random projection of the output. Entries whose
    perturbation flips any ReLU are skipped; for entries with both
    gradients below ``1e-6`` the absolute error is used.
    """
    if m_agg is None:
        m_agg = aggregation_matrix(graph, config.aggregation)
    rng = np.random.default_rng(seed)
    base = forward(m_agg, features, params, config)
    proj = rng.standard_normal(base.output.shape)
    analytic = backward(m_agg, features, params, config, base, proj).flat()
    theta = params.flat()
    n_params = theta.size
    pick = (np.arange(n_params) if n_params <= num_entries
            else rng.choice(n_params, size=num_entries, replace=False))
    pattern = [a > 0 for a in base.act_in]
    worst = 0.0
    for idx in pick:
        vals = []
        flipped = False
        for sign in (1.0, -1.0):
            t = theta.copy()
            t[idx] += sign * step
            c = forward(m_agg, features, params.with_flat(t), config)
            if config.activation == "relu" and any(
                    np.any((a > 0) != p) for a, p in zip(c.act_in, pattern)):
                flipped = True
                break
            vals.append(float(np.sum(proj * c.output)))
        if flipped:
            continue
        fd = (vals[0] - vals[1]) / (2.0 * step)
        an = analytic[idx]
        scale = max(abs(fd), abs(an))
        err = abs(fd - an) / scale if scale > 1e-6 else abs(fd - an)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# empirical tangent kernel

@dataclass
class EmpiricalNtk:
    matrix: np.ndarray
    width: int
    num_inits: int
    coordinates: int
    per_init: list = field(default_factory=list)


class _Cotangent:
    """Batch of output cotangents ``J[i, u, v, :]`` for one chunk of coordinates.

    Three layouts, from cheapest to most general:

    * lazy:     ``J = coeff[u, v] A[i, u, :]``
    * rowmult:  ``J = Σ_r coeff[u, r] d[r, :] post[r, v] A[i, u, :]``
    * dense:    ``(ci, n, n, m)``
    """

    def __init__(self, lazy=None, coeff=None, dense=None, rowmult=None, post=None):
        self.lazy, self.coeff, self.dense = lazy, coeff, dense
        self.rowmult, self.post = rowmult, post

    def _is_diag(self):
        c = self.coeff
        return np.count_nonzero(c - np.diag(np.diag(c))) == 0

    def to_dense(self) -> np.ndarray:
        if self.dense is not None:
            return self.dense
        a, c = self.lazy, self.coeff
        if self.rowmult is None:
            return c[None, :, :, None] * a[:, :, None, :]
        # Σ_r c[u,r] d[r,j] post[r,v] A[i,u,j]
        cd = np.einsum("ur,rj,rv->uvj", c, self.rowmult, self.post, optimize=True)
        return a[:, :, None, :] * cd[None]

    def gram(self, g: np.ndarray) -> np.ndarray:
        """``sum_{i,j,v,v'} g[v,v'] J[i,u,v,j] J[i,u',v',j]`` as an (n, n) matrix."""
        if self.dense is None and self.rowmult is None:
            p = np.einsum("iuj,iwj->uw", self.lazy, self.lazy, optimize=True)
            return (self.coeff @ g @ self.coeff.T) * p
        if self.dense is None:
            a, c, d, e = self.lazy, self.coeff, self.rowmult, self.post
            n, m = d.shape
            t = np.einsum("iuj,iwj->uwj", a, a, optimize=True).reshape(n * n, m)
            dd = (d[:, None, :] * d[None, :, :]).reshape(n * n, m)
            w = (t @ dd.T).reshape(n, n, n, n)                      # (u, u', r, r')
            ege = e @ g @ e.T
            return np.einsum("ur,ws,rs,uwrs->uw", c, c, ege, w, optimize=True)
        d = self.dense
        ci, n, _, m = d.shape
        x = d.transpose(1, 2, 0, 3).reshape(n * n, ci * m)
        p = (x @ x.T).reshape(n, n, n, n)
        return np.einsum("uvwx,vx->uw", p, g, optimize=True)

    def row_sum_gram(self) -> np.ndarray:
        n = (self.coeff if self.dense is None else self.dense[0]).shape[0]
        return self.gram(np.ones((n, n)))

    def matmul(self, w: np.ndarray, scale: float) -> "_Cotangent":
        if self.dense is None and self.rowmult is None:
            a = self.lazy
            out = np.empty(a.shape[:2] + (w.shape[1],))
            for u in range(a.shape[1]):
                # zero columns (inactive ReLUs) do not contribute
                live = np.flatnonzero(np.any(a[:, u, :] != 0, axis=0))
                out[:, u, :] = a[:, u, live] @ w[live, :]
            return _Cotangent(lazy=scale * out, coeff=self.coeff)
        return _Cotangent(dense=scale * (self.to_dense() @ w))

    def mult_rows(self, d: np.ndarray) -> "_Cotangent":
        """Multiply row ``v`` by ``d[v, :]``."""
        if self.dense is None and self.rowmult is None:
            if self._is_diag():
                scaled = self.lazy * d[None, :, :] * np.diag(self.coeff)[None, :, None]
                return _Cotangent(lazy=scaled, coeff=np.eye(len(d)))
            return _Cotangent(lazy=self.lazy, coeff=self.coeff, rowmult=d,
                              post=np.eye(len(d)))
        return _Cotangent(dense=self.to_dense() * d[None, None, :, :])

    def aggregate_back(self, m: np.ndarray) -> "_Cotangent":
        """``J'[i,u,w] = sum_v M[v,w] J[i,u,v]``."""
        if self.dense is None and self.rowmult is None:
            return _Cotangent(lazy=self.lazy, coeff=self.coeff @ m)
        if self.dense is None:
            return _Cotangent(lazy=self.lazy, coeff=self.coeff, rowmult=self.rowmult,
                              post=self.post @ m)
        return _Cotangent(dense=np.einsum("iuvj,vw->iuwj", self.dense, m, optimize=True))


def _ntk_single(m_agg: np.ndarray, h: np.ndarray, params: GcnParams, config: NetConfig
                ) -> np.ndarray:
    """Exact ``(1/m_out) Σ_i ∇θ z_i(u) · ∇θ z_i(u')`` for one parameter draw."""
    cache = forward(m_agg, h, params, config)
    n = h.shape[0]
    k = params.num_layers
    if k == 0:
        return h @ h.T
    sw, sb_sq = np.sqrt(config.sigma_w_sq), config.sigma_b_sq
    grams = [x @ x.T for x in cache.post]
    deriv = [dphi(config.activation, a) for a in cache.act_in]
    w_top = params.weights[-1]
    m_out = w_top.shape[0]
    m = params.width
    ci = max(1, min(m_out, _CHUNK_BYTES // (8 * n * n * m)))
    total = np.zeros((n, n))
    s_top = sw / np.sqrt(w_top.shape[1])
    # the top layer's own parameters: identity cotangent
    total += m_out * (s_top ** 2 * grams[-1] + sb_sq)
    eye = np.eye(n)
    for lo in range(0, m_out, ci):
        rows = w_top[lo:lo + ci]                              # (ci, m)
        lazy = np.broadcast_to(s_top * rows[:, None, :], (len(rows), n, m)).copy()
        cot = _Cotangent(lazy=lazy, coeff=eye).mult_rows(deriv[-1])
        if (k - 1) % params.R == 0:
            cot = cot.aggregate_back(m_agg)
        for layer in range(k - 2, -1, -1):
            w = params.weights[layer]
            s = sw / np.sqrt(w.shape[1])
            total += s * s * cot.gram(grams[layer])
            if sb_sq:
                total += sb_sq * cot.row_sum_gram()
            cot = cot.matmul(w, s).mult_rows(deriv[layer])
            if layer % params.R == 0:
                cot = cot.aggregate_back(m_agg)
        total += cot.gram(h @ h.T)
    out = total / m_out
    return 0.5 * (out + out.T)


def empirical_ntk(graph: Graph, features, config: NetConfig, width: int, num_inits: int,
                  seed: int = 0, allow_wide: bool = False) -> EmpiricalNtk:
    if width < 8:
        raise DataError("width must be >= 8")
    if num_inits < 1:
        raise DataError("num_inits must be >= 1")
    h = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, float)
    n = graph.node_count
    if 8 * n * n * width > _CHUNK_BYTES:
        raise DataError(f"n={n}, width={width} exceeds the cotangent memory budget")
    m_agg = aggregation_matrix(graph, config.aggregation)
    m_agg = m_agg.toarray() if sp.issparse(m_agg) else m_agg
    per = []
    for k in range(num_inits):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), k]))
        params = init_params(h.shape[1], width, config.L, config.R, rng=rng,
                             allow_wide=allow_wide)
        per.append(_ntk_single(m_agg, h, params, config))
    mat = np.mean(per, axis=0)
    return EmpiricalNtk(mat, width, num_inits, width, per)


def ntk_by_jacobian(m_agg, h, params: GcnParams, config: NetConfig) -> np.ndarray:
    """Reference kernel from the full output Jacobian (small instances only)."""
    cache = forward(m_agg, h, params, config)
    n, m_out = cache.output.shape
    rows = []
    for u in range(n):
        for i in range(m_out):
            g = np.zeros((n, m_out))
            g[u, i] = 1.0
            rows.append(backward(m_agg, h, params, config, cache, g).flat())
    jac = np.array(rows).reshape(n, m_out, -1)
    return np.einsum("uip,wip->uw", jac, jac) / m_out


def ntk_comparison(empirical: EmpiricalNtk, analytic: np.ndarray) -> dict:
    diff = empirical.matrix - analytic
    return {
        "width": empirical.width,
        "inits": empirical.num_inits,
        "rel_frobenius_error": float(np.linalg.norm(diff) / np.linalg.norm(analytic)),
        "max_entry_error": float(np.abs(diff).max()),
    }


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainingCurves:
    epoch: np.ndarray
    loss: np.ndarray
    train_acc: np.ndarray
    test_acc: np.ndarray
    edges_per_epoch: np.ndarray | None = None

    def rows(self):
        for e, l, a, b in zip(self.epoch, self.loss, self.train_acc, self.test_acc):
            yield (int(e), l, a, b)

    @property
    def final_train_acc(self) -> float:
        return float(self.train_acc[-1])

    @property
    def final_test_acc(self) -> float:
        return float(self.test_acc[-1])


def _accuracy(out, labels, nodes):
    if len(nodes) == 0:
        return float("nan")
    return float(np.mean(np.argmax(out[nodes], axis=1) == labels[nodes]))


def train_gcn(graph: Graph, features, labels: LabelVector, split: DatasetSplit,
              config: NetConfig, width: int, depth: int, epochs: int, lr: float,
              sampler: SampleConfig | None = None, seed: int = 0,
              allow_wide: bool = False, per_unit: bool = False) -> TrainingCurves:
    """Full-batch gradient descent on MSE to one-hot train labels.

    ``depth`` is the number of propagation units; the last layer maps to the
    class count. With ``sampler``, training forwards use a sampled subgraph
    (fresh per epoch when ``resample_each_epoch``); accuracies are measured
    on the full graph. ``per_unit`` draws a separate subgraph for every
    propagation unit instead of one shared by all units.
    """
    if lr <= 0:
        raise DataError("learning rate must be positive")
    if depth < 1 or epochs < 1:
        raise DataError("need depth >= 1 and epochs >= 1")
    h = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, float)
    if h.shape[0] != graph.node_count:
        raise DataError("feature rows do not match node count")
    split.validate(graph.node_count, labels)
    config = NetConfig(config.activation, config.sigma_w_sq, config.sigma_b_sq,
                       config.R, depth, config.aggregation)
    rng = np.random.default_rng(seed)
    params = init_params(h.shape[1], width, depth, config.R, labels.num_classes,
                         rng=rng, allow_wide=allow_wide)
    full = aggregation_matrix(graph, config.aggregation, dense=False)
    train = np.asarray(split.train)
    test = np.asarray(split.test)
    y = labels.one_hot(train)
    ytrue = labels.labels
    sample_rng = None
    current = full
    if sampler is not None:
        sample_rng = np.random.default_rng(np.random.SeedSequence([int(sampler.seed), int(seed)]))
    losses, tr_acc, te_acc, edges = [], [], [], []
    for epoch in range(epochs):
        if sampler is not None and (epoch == 0 or sampler.resample_each_epoch):
            if per_unit:
                subs = [sample_edges(graph, sampler, sample_rng) for _ in range(depth)]
                current = [aggregation_matrix(g, config.aggregation, dense=False) for g in subs]
                edges.append(int(np.mean([g.edge_count for g in subs])))
            else:
                sub = sample_edges(graph, sampler, sample_rng)
                current = aggregation_matrix(sub, config.aggregation, dense=False)
                edges.append(sub.edge_count)
        elif sampler is not None:
            edges.append(edges[-1])
        cache = forward(current, h, params, config)
        resid = cache.output[train] - y
        loss = 0.5 * float(np.sum(resid * resid)) / len(train)
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise NumericalError(f"training diverged at epoch {epoch}: loss={loss:.3e} "
                                 f"(lr={lr}, depth={depth}, width={width})")
        # accuracies are taken on the full graph before this epoch's update
        out = cache.output if sampler is None else forward(full, h, params, config).output
        losses.append(loss)
        tr_acc.append(_accuracy(out, ytrue, train))
        te_acc.append(_accuracy(out, ytrue, test))
        g_out = np.zeros_like(cache.output)
        g_out[train] = resid / len(train)
        grads = backward(current, h, params, config, cache, g_out)
        params = GcnParams(params.embed - lr * grads.embed,
                           [w - lr * g for w, g in zip(params.weights, grads.weights)],
                           [b - lr * g for b, g in zip(params.biases, grads.biases)],
                           params.width, params.R)
    return TrainingCurves(np.arange(1, epochs + 1), np.array(losses), np.array(tr_acc),
                          np.array(te_acc), np.array(edges) if edges else None)
