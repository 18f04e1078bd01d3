"""Undirected graphs, node data, and plain-text dataset ingestion.

File formats
------------
edge list
    One ``u v`` pair of integer node ids per line. ``#`` starts a comment.
    A ``#nodes N`` header fixes the node count (otherwise ``1 + max id``).
features
    One row of numbers per node, separated by whitespace or commas.
labels
    ``node_id label`` per line; nodes not listed carry the missing label.
splits
    Sections introduced by ``TRAIN``, ``VAL`` and ``TEST`` lines, each
    followed by node ids (whitespace or comma separated, any line layout).
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import DataError

MISSING_LABEL = -1

_NODES_HEADER = re.compile(r"^#\s*nodes\s+(\d+)\s*$", re.IGNORECASE)


@dataclass(frozen=True, eq=False)
class Graph:
    """Simple undirected graph on nodes ``0 .. node_count-1``.

    ``edges`` is an ``(E, 2)`` integer array of canonical pairs ``u < v``,
    sorted lexicographically and free of duplicates and self-loops.
    """

    node_count: int
    edges: np.ndarray
    neighbor_index: tuple = field(repr=False)
    degrees: np.ndarray = field(repr=False)

    @classmethod
    def from_edges(cls, node_count: int, pairs: Iterable) -> "Graph":
        """Build a graph from any iterable of node pairs.

        Pairs are canonicalized and deduplicated. Self-loops and ids
        outside ``[0, node_count)`` raise :class:`DataError`.
        """
        node_count = int(node_count)
        if node_count < 1:
            raise DataError(f"node_count must be positive, got {node_count}")
        arr = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs,
                         dtype=np.int64)
        if arr.size == 0:
            arr = np.zeros((0, 2), dtype=np.int64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise DataError("edges must be a sequence of (u, v) pairs")
        if arr.size and (arr.min() < 0 or arr.max() >= node_count):
            raise DataError(f"node id outside [0, {node_count})")
        loops = arr[:, 0] == arr[:, 1]
        if loops.any():
            u = int(arr[loops][0, 0])
            raise DataError(f"self-loop on node {u}")
        canon = np.sort(arr, axis=1)
        canon = np.unique(canon, axis=0) if len(canon) else canon
        return cls._from_canonical(node_count, canon)

    @classmethod
    def _from_canonical(cls, node_count: int, canon: np.ndarray) -> "Graph":
        canon = np.ascontiguousarray(canon, dtype=np.int64).reshape(-1, 2)
        canon.setflags(write=False)
        both = np.concatenate([canon, canon[:, ::-1]]) if len(canon) else canon
        order = np.lexsort((both[:, 1], both[:, 0])) if len(both) else np.zeros(0, int)
        both = both[order]
        degrees = np.bincount(both[:, 0], minlength=node_count).astype(np.int64)
        splits = np.cumsum(degrees)[:-1]
        nbrs = tuple(np.split(both[:, 1], splits)) if len(both) else tuple(
            np.zeros(0, np.int64) for _ in range(node_count))
        for a in nbrs:
            a.setflags(write=False)
        degrees.setflags(write=False)
        return cls(node_count, canon, nbrs, degrees)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def edge_set(self) -> set:
        return {(int(u), int(v)) for u, v in self.edges}

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency matrix without self-loops."""
        n = self.node_count
        e = self.edges
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    def components(self) -> tuple[int, np.ndarray]:
        """Number of connected components and a per-node component label."""
        return connected_components(self.adjacency(), directed=False)

    def is_connected(self) -> bool:
        return self.components()[0] == 1

    def permuted(self, perm) -> "Graph":
        """Relabel node ``u`` as ``perm[u]``."""
        perm = np.asarray(perm, dtype=np.int64)
        return Graph.from_edges(self.node_count, perm[self.edges])

    def subgraph_with_edges(self, edges: np.ndarray) -> "Graph":
        """Same node set, restricted to a subset of this graph's edges."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        return Graph._from_canonical(
            self.node_count, edges[np.lexsort((edges[:, 1], edges[:, 0]))])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.node_count).encode())
        h.update(self.edges.astype("<i8").tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.node_count == other.node_count
                and np.array_equal(self.edges, other.edges))

    def __hash__(self):
        return hash(self.content_hash())


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] == 0 or v.shape[1] == 0:
            raise DataError("feature matrix must be a non-empty 2-D array")
        if self.normalized:
            norms = np.linalg.norm(v, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-12):
                raise DataError("normalized=True but rows are not unit norm")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_array(cls, values, normalize: bool = True) -> "FeatureMatrix":
        """Wrap raw rows, scaling each to unit Euclidean norm by default."""
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if not normalize:
            return cls(v, normalized=False)
        norms = np.linalg.norm(v, axis=1)
        zero = np.flatnonzero(norms == 0)
        if len(zero):
            raise DataError(f"cannot normalize zero feature row(s): {zero[:5].tolist()}")
        return cls(v / norms[:, None], normalized=True)

    @property
    def shape(self):
        return self.values.shape

    def permuted(self, perm) -> "FeatureMatrix":
        out = np.empty_like(self.values)
        out[np.asarray(perm)] = self.values
        return FeatureMatrix(out, self.normalized)


@dataclass(frozen=True, eq=False)
class LabelVector:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        y = np.asarray(self.labels, dtype=np.int64).copy()
        bad = (y != MISSING_LABEL) & ((y < 0) | (y >= self.num_classes))
        if bad.any():
            raise DataError(f"label out of range [0, {self.num_classes}) at node "
                            f"{int(np.flatnonzero(bad)[0])}")
        y.setflags(write=False)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.labels)

    def one_hot(self, index=None) -> np.ndarray:
        y = self.labels if index is None else self.labels[np.asarray(index)]
        if np.any(y == MISSING_LABEL):
            raise DataError("one-hot expansion of missing labels")
        out = np.zeros((len(y), self.num_classes))
        out[np.arange(len(y)), y] = 1.0
        return out


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        parts = {}
        for name in ("train", "validation", "test"):
            a = np.asarray(getattr(self, name), dtype=np.int64).ravel().copy()
            if len(np.unique(a)) != len(a):
                raise DataError(f"duplicate ids in {name} split")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
            parts[name] = set(a.tolist())
        names = list(parts)
        for i in range(3):
            for j in range(i + 1, 3):
                common = parts[names[i]] & parts[names[j]]
                if common:
                    raise DataError(f"{names[i]} and {names[j]} splits overlap "
                                    f"(e.g. node {min(common)})")

    def validate(self, node_count: int, labels: LabelVector | None = None):
        for name in ("train", "validation", "test"):
            a = getattr(self, name)
            if len(a) and (a.min() < 0 or a.max() >= node_count):
                raise DataError(f"{name} split id outside [0, {node_count})")
            if labels is not None and np.any(labels.labels[a] == MISSING_LABEL):
                raise DataError(f"{name} split contains unlabeled nodes")


# ---------------------------------------------------------------- file i/o

def load_graph(edge_file) -> Graph:
    path = Path(edge_file)
    declared = None
    pairs = []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                m = _NODES_HEADER.match(line)
                if m:
                    declared = int(m.group(1))
                continue
            line = line.split("#", 1)[0]
            tok = line.split()
            if len(tok) != 2:
                raise DataError(f"{path}:{lineno}: expected 'u v', got {raw.rstrip()!r}")
            try:
                u, v = int(tok[0]), int(tok[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer node id in {raw.rstrip()!r}")
            if u < 0 or v < 0:
                raise DataError(f"{path}:{lineno}: negative node id")
            if u == v:
                raise DataError(f"{path}:{lineno}: self-loop on node {u}")
            if declared is not None and max(u, v) >= declared:
                raise DataError(f"{path}:{lineno}: node id {max(u, v)} >= declared "
                                f"node count {declared}")
            pairs.append((u, v))
    if declared is None:
        if not pairs:
            raise DataError(f"{path}: no edges and no '#nodes N' header")
        declared = 1 + max(max(p) for p in pairs)
    return Graph.from_edges(declared, pairs)


def save_graph(graph: Graph, edge_file) -> None:
    """Write the canonical edge list with a ``#nodes`` header."""
    lines = [f"#nodes {graph.node_count}"]
    lines += [f"{u} {v}" for u, v in graph.edges]
    Path(edge_file).write_text("\n".join(lines) + "\n")


def _read_rows(path: Path) -> np.ndarray:
    rows = []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                rows.append([float(t) for t in re.split(r"[,\s;]+", line) if t])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric feature value")
    if not rows:
        raise DataError(f"{path}: empty feature file")
    width = {len(r) for r in rows}
    if len(width) != 1:
        raise DataError(f"{path}: ragged feature rows (widths {sorted(width)})")
    return np.array(rows)


def load_features(feature_file, normalize: bool = True) -> FeatureMatrix:
    return FeatureMatrix.from_array(_read_rows(Path(feature_file)), normalize=normalize)


def load_labels(label_file, node_count: int, num_classes: int | None = None) -> LabelVector:
    path = Path(label_file)
    y = np.full(node_count, MISSING_LABEL, dtype=np.int64)
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) != 2:
                raise DataError(f"{path}:{lineno}: expected 'node_id label'")
            try:
                u, c = int(tok[0]), int(tok[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer entry")
            if not 0 <= u < node_count:
                raise DataError(f"{path}:{lineno}: node id {u} outside [0, {node_count})")
            if c < 0:
                raise DataError(f"{path}:{lineno}: negative label {c}")
            y[u] = c
    k = int(y.max()) + 1 if num_classes is None else num_classes
    return LabelVector(y, max(k, 1))


def load_split(split_file) -> DatasetSplit:
    path = Path(split_file)
    sections = {"TRAIN": [], "VAL": [], "TEST": []}
    current = None
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            head = line.split()[0].rstrip(":").upper()
            if head in ("VALIDATION",):
                head = "VAL"
            if head in sections:
                current = head
                line = line.split(None, 1)[1] if len(line.split(None, 1)) > 1 else ""
            if not line:
                continue
            if current is None:
                raise DataError(f"{path}:{lineno}: ids before any TRAIN/VAL/TEST header")
            try:
                sections[current] += [int(t) for t in re.split(r"[,\s]+", line) if t]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer node id")
    return DatasetSplit(sections["TRAIN"], sections["VAL"], sections["TEST"])


def save_split(split: DatasetSplit, split_file) -> None:
    out = []
    for name, ids in (("TRAIN", split.train), ("VAL", split.validation),
                      ("TEST", split.test)):
        out.append(name)
        out.append(" ".join(str(int(i)) for i in ids))
    Path(split_file).write_text("\n".join(out) + "\n")


def load_dataset(feature_file, label_file, split_file, graph: Graph,
                 normalize: bool = True):
    """Load features, labels, and the split for ``graph``.

    Returns
    -------
    (FeatureMatrix, LabelVector, DatasetSplit)
    """
    feats = load_features(feature_file, normalize=normalize)
    if feats.shape[0] != graph.node_count:
        raise DataError(f"feature rows ({feats.shape[0]}) != node count "
                        f"({graph.node_count})")
    labels = load_labels(label_file, graph.node_count)
    split = load_split(split_file)
    split.validate(graph.node_count, labels)
    return feats, labels, split


def load_cora(content_file, cites_file, normalize: bool = True):
    """Read the raw ``cora.content`` / ``cora.cites`` pair.

    Paper ids are remapped to ``0..n-1`` in file order, class names sorted
    alphabetically. Each citation line counts as one raw link; reciprocal
    or repeated citations collapse to one undirected edge in the graph.

    Returns ``(graph, features, labels, raw_link_count)``.
    """
    ids, rows, classes = [], [], []
    with Path(content_file).open() as fh:
        for raw in fh:
            tok = raw.split()
            if not tok:
                continue
            ids.append(tok[0])
            rows.append([float(t) for t in tok[1:-1]])
            classes.append(tok[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    names = sorted(set(classes))
    y = np.array([names.index(c) for c in classes])
    pairs, links = [], 0
    with Path(cites_file).open() as fh:
        for raw in fh:
            tok = raw.split()
            if len(tok) != 2:
                continue
            links += 1
            a, b = index.get(tok[0]), index.get(tok[1])
            if a is None or b is None or a == b:
                continue
            pairs.append((a, b))
    graph = Graph.from_edges(len(ids), pairs)
    feats = np.array(rows)
    if normalize:
        norms = np.linalg.norm(feats, axis=1)
        norms[norms == 0] = 1.0
        feats = feats / norms[:, None]
        ok = np.all(np.abs(np.linalg.norm(feats, axis=1) - 1) < 1e-12)
        return graph, FeatureMatrix(feats, normalized=bool(ok)), LabelVector(y, len(names)), links
    return graph, FeatureMatrix(feats), LabelVector(y, len(names)), links


# ------------------------------------------------------------- generators

def generate_sbm(n: int, p_in: float, p_out: float, seed: int, blocks: int = 2):
    """Two-block stochastic block model.

    Nodes ``0..n/2-1`` form block 0, the rest block 1. Each pair is joined
    independently with probability ``p_in`` inside a block and ``p_out``
    across blocks.

    Returns
    -------
    (Graph, LabelVector)
    """
    if blocks != 2:
        raise DataError("only two blocks are supported")
    if n < 2 or n % 2:
        raise DataError(f"n must be a positive even integer, got {n}")
    if not (0.0 <= p_out < p_in <= 1.0):
        raise DataError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(2), n // 2)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(len(iu)) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    return Graph._from_canonical(n, edges), LabelVector(labels, 2)


def path_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def complete_graph(n: int) -> Graph:
    iu, ju = np.triu_indices(n, k=1)
    return Graph._from_canonical(n, np.stack([iu, ju], axis=1))
