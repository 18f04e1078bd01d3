"""Edge subsampling, Erdős–Rényi graphs and percolation sweeps.

Critical sampling keeps ``ρ = |V| / (2|E|)`` of the edges, i.e. about ``n/2``
edges, which puts the kept graph at the ER connectivity threshold
``p_c = 1 / (n - 1)`` relative to the complete graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError
from .graph import Graph


@dataclass(frozen=True)
class SampleConfig:
    mode: str = "critical"
    rate: float | None = None
    seed: int = 0
    resample_each_epoch: bool = True

    def __post_init__(self):
        if self.mode not in ("critical", "fixed_rate"):
            raise DataError(f"sampling mode must be 'critical' or 'fixed_rate', got {self.mode!r}")
        if self.mode == "fixed_rate":
            if self.rate is None or not 0.0 < self.rate <= 1.0:
                raise DataError(f"fixed_rate mode needs a rate in (0, 1], got {self.rate}")

    @classmethod
    def critical(cls, seed: int = 0, resample_each_epoch: bool = True):
        return cls("critical", None, seed, resample_each_epoch)

    @classmethod
    def fixed(cls, rate: float, seed: int = 0, resample_each_epoch: bool = True):
        return cls("fixed_rate", rate, seed, resample_each_epoch)

    def effective_rate(self, graph: Graph) -> float:
        return critical_rate(graph) if self.mode == "critical" else float(self.rate)

    def kept_count(self, graph: Graph) -> int:
        """Edges kept from ``graph``; critical mode rounds ``|V|/2`` exactly."""
        e = graph.edge_count
        if self.mode == "critical":
            if e < 1:
                raise DataError("critical rate is undefined for an edgeless graph")
            # round(|V|/2) with ties up, in integers (rate·|E| can land just below .5)
            return max(1, min(e, (graph.node_count + 1) // 2))
        return kept_edge_count(self.rate, e)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "rate": self.rate, "seed": self.seed,
                "resample_each_epoch": self.resample_each_epoch}


def critical_rate_from_counts(node_count: int, edge_count: int) -> float:
    if edge_count < 1:
        raise DataError("critical rate is undefined for an edgeless graph")
    return min(1.0, node_count / (2.0 * edge_count))


def critical_rate(graph: Graph) -> float:
    return critical_rate_from_counts(graph.node_count, graph.edge_count)


def critical_probability(n: int) -> float:
    """ER connectivity threshold ``1 / (n - 1)``."""
    if n < 2:
        raise DataError("need n >= 2")
    return 1.0 / (n - 1)


def kept_edge_count(rate: float, edge_count: int) -> int:
    """``round(rate·|E|)`` with ties rounded up, at least 1."""
    return max(1, min(edge_count, math.floor(rate * edge_count + 0.5)))


def sample_edges(graph: Graph, config: SampleConfig, rng: np.random.Generator | None = None
                 ) -> Graph:
    """Uniform sample of exactly ``k`` edges without replacement.

    ``rng`` overrides the generator seeded from ``config.seed`` (training
    draws one stream and samples from it every epoch).
    """
    e = graph.edge_count
    if e == 0:
        raise DataError("cannot sample edges from an edgeless graph")
    k = config.kept_count(graph)
    if k == e:
        return graph
    if rng is None:
        rng = np.random.default_rng(config.seed)
    idx = np.sort(rng.choice(e, size=k, replace=False))
    return graph.subgraph_with_edges(graph.edges[idx])


def _pair_from_index(idx: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Map linear indices over the strict upper triangle (row-major) to pairs."""
    idx = idx.astype(np.float64)
    # row i starts at offset i*n - i*(i+1)/2
    b = 2.0 * n - 1.0
    i = np.floor((b - np.sqrt(b * b - 8.0 * idx)) / 2.0).astype(np.int64)
    idx = idx.astype(np.int64)
    start = i * n - i * (i + 1) // 2
    # guard against floating point at row boundaries
    over = idx >= start + (n - 1 - i)
    i = np.where(over, i + 1, i)
    start = i * n - i * (i + 1) // 2
    under = idx < start
    i = np.where(under, i - 1, i)
    start = i * n - i * (i + 1) // 2
    j = idx - start + i + 1
    return i, j


def er_graph(n: int, p: float, seed=None, rng: np.random.Generator | None = None) -> Graph:
    """G(n, p): every pair joined independently with probability ``p``.

    The edge count is drawn from ``Binomial(C(n,2), p)`` and that many
    distinct pairs are chosen uniformly, which has the same law as
    independent coin flips but costs ``O(|E|)``.
    """
    if n < 2:
        raise DataError(f"need n >= 2, got {n}")
    if not 0.0 <= p <= 1.0:
        raise DataError(f"edge probability must lie in [0, 1], got {p}")
    if rng is None:
        rng = np.random.default_rng(seed)
    total = n * (n - 1) // 2
    m = int(rng.binomial(total, p))
    if m == 0:
        return Graph._from_canonical(n, np.empty((0, 2), dtype=np.int64))
    idx = np.sort(rng.choice(total, size=m, replace=False))
    i, j = _pair_from_index(idx, n)
    return Graph._from_canonical(n, np.stack([i, j], axis=1))


class DisjointSet:
    """Union-find with path halving and union by size."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.count = n

    def find(self, x: int) -> int:
        parent = self.parent
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        self.count -= 1
        return True

    def largest(self) -> int:
        return max((self.size[r] for r, p in enumerate(self.parent) if p == r), default=0)


def largest_component(graph: Graph) -> tuple[int, int]:
    """``(size of the largest component, number of components)``."""
    ds = DisjointSet(graph.node_count)
    for a, b in graph.edges.tolist():
        ds.union(a, b)
    return ds.largest(), ds.count


@dataclass
class PercolationStats:
    n: int
    p_values: np.ndarray
    trials: int
    largest: np.ndarray          # (len(p_values), trials)
    components: np.ndarray       # (len(p_values), trials)
    labels: list = field(default_factory=list)

    @property
    def median(self) -> np.ndarray:
        return np.median(self.largest, axis=1)

    @property
    def mean(self) -> np.ndarray:
        return self.largest.mean(axis=1)

    def rows(self):
        for a, p in enumerate(self.p_values):
            for t in range(self.trials):
                yield (p, t, int(self.largest[a, t]), int(self.components[a, t]))


def trial_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent stream for ``(seed, *key)``, order-independent across trials."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


def percolation_sweep(n: int, p_values: Sequence[float], trials: int, seed: int = 0,
                      labels: Sequence[str] | None = None) -> PercolationStats:
    if trials < 10:
        raise DataError(f"need at least 10 trials, got {trials}")
    p_values = np.asarray(p_values, dtype=np.float64)
    largest = np.empty((len(p_values), trials), dtype=np.int64)
    comps = np.empty_like(largest)
    for a, p in enumerate(p_values):
        for t in range(trials):
            g = er_graph(n, float(p), rng=trial_rng(seed, a, t))
            largest[a, t], comps[a, t] = largest_component(g)
    return PercolationStats(n, p_values, trials, largest, comps,
                            list(labels) if labels is not None else [])


def parse_p_values(text: str, n: int) -> tuple[list[float], list[str]]:
    """Parse ``"0.5pc,pc,2pc,0.001"`` relative to ``p_c = 1/(n-1)``."""
    pc = critical_probability(n)
    values, labels = [], []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            if tok.endswith("pc"):
                head = tok[:-2].rstrip("*")
                values.append((float(head) if head else 1.0) * pc)
            else:
                values.append(float(tok))
        except ValueError:
            raise DataError(f"cannot parse edge probability {tok!r}") from None
        if not 0.0 <= values[-1] <= 1.0:
            raise DataError(f"edge probability {tok!r} outside [0, 1]")
        labels.append(tok)
    if not values:
        raise DataError("no edge probabilities given")
    return values, labels


def sampled_operators(graph: Graph, config: SampleConfig, delta=None, per_unit=False):
    """Operator factory ``l -> AggregationOperator`` on critical subgraphs.

    With ``per_unit`` a fresh subgraph is drawn for every propagation unit;
    otherwise one subgraph serves the whole run.
    """
    from .aggregation import build_operator

    rng = np.random.default_rng(config.seed)
    if not per_unit:
        op = build_operator(sample_edges(graph, config, rng), delta)
        return lambda _l: op
    cache = {}

    def get(l):
        if l not in cache:
            cache[l] = build_operator(sample_edges(graph, config, rng), delta)
        return cache[l]
    return get


def average_sampled_gntk(graph: Graph, features, gntk_config, sample_config: SampleConfig,
                         num_samples: int = 1, per_unit: bool = False) -> np.ndarray:
    """Average the GNTK over ``num_samples`` independent sampled graphs."""
    from .engine import compute_gntk

    if num_samples < 1:
        raise DataError("num_samples must be >= 1")
    acc = None
    for k in range(num_samples):
        cfg = SampleConfig(sample_config.mode, sample_config.rate,
                           int(np.random.SeedSequence([sample_config.seed, k]).generate_state(1)[0]),
                           sample_config.resample_each_epoch)
        ops = sampled_operators(graph, cfg, gntk_config.residual_aggregation, per_unit)
        theta, _ = compute_gntk(graph, features, gntk_config.replace(record_trace=False), ops)
        acc = theta if acc is None else acc + theta
    return acc / num_samples
