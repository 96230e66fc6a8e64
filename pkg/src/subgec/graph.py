"""Attributed graphs: the on-disk dataset format, normalisation, BFS subgraphs.

Dataset directory layout (UTF-8, tab separated, ``\\n`` line endings)::

    meta.json        {"name": ..., "num_nodes": N, "num_features": C, "num_classes": K}
    edges.tsv        "u<TAB>v" per line, 0-based node ids
    features.tsv     N lines of C decimal floats
    labels.tsv       N lines, one integer class id each
    split_train.txt  one node id per line (likewise split_val.txt, split_test.txt)
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class LoadError(Exception):
    """Malformed dataset directory; the message names the file and line."""

    def __init__(self, path, message: str, line: int | None = None):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = Path(path)
        self.line = line


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected attributed graph.

    ``adj`` is a symmetric CSR matrix with unit weights, sorted column
    indices, no self-loops and no duplicates.
    """

    adj: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray
    splits: dict[str, np.ndarray]
    num_classes: int
    name: str = "graph"
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.adj.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        """Undirected edge count."""
        return self.adj.nnz // 2

    def neighbors(self, i: int) -> np.ndarray:
        return self.adj.indices[self.adj.indptr[i] : self.adj.indptr[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.adj.indptr)

    def validate(self) -> None:
        a = self.adj
        if a.shape != (self.n, self.n):
            raise ValueError("adjacency must be square")
        if a.diagonal().any():
            raise ValueError("adjacency has self-loops")
        if (a != a.T).nnz:
            raise ValueError("adjacency is not symmetric")
        if a.nnz and a.data.max() != 1:
            raise ValueError("adjacency has duplicate edges")
        if self.features.shape[0] != self.n or self.labels.shape[0] != self.n:
            raise ValueError("features/labels row count differs from node count")
        seen = np.zeros(self.n, dtype=bool)
        for name in SPLITS:
            ids = self.splits[name]
            if ids.size and (ids.min() < 0 or ids.max() >= self.n):
                raise ValueError(f"split {name} has ids outside [0, {self.n})")
            if seen[ids].any() or np.unique(ids).size != ids.size:
                raise ValueError(f"split {name} overlaps another split")
            seen[ids] = True

    # derived matrices, cached because the graph never changes
    def normalized_adjacency(self) -> sp.csr_matrix:
        if "norm" not in self._cache:
            self._cache["norm"] = normalize_adjacency(self)
        return self._cache["norm"]

    def mean_adjacency(self) -> sp.csr_matrix:
        """Row-normalised A; isolated nodes get an all-zero row."""
        if "mean" not in self._cache:
            deg = self.degrees().astype(float)
            inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
            self._cache["mean"] = sp.diags(inv) @ self.adj
        return self._cache["mean"]

    def self_loop_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(target, source) lists of A + I, grouped by target."""
        if "loops" not in self._cache:
            m = (self.adj + sp.identity(self.n, format="csr")).tocsr()
            m.sort_indices()
            rows = np.repeat(np.arange(self.n), np.diff(m.indptr))
            self._cache["loops"] = (rows, m.indices.astype(np.int64))
        return self._cache["loops"]


def from_edges(
    n: int,
    edges,
    features=None,
    labels=None,
    splits=None,
    num_classes: int | None = None,
    name: str = "graph",
) -> Graph:
    """Build a graph from an edge list, symmetrising and dropping loops/duplicates."""
    e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    e = e.reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        raise IndexError(f"edge endpoint outside [0, {n})")
    adj = _adjacency(n, e)
    feats = np.eye(n) if features is None else np.asarray(features, dtype=np.float64)
    lab = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    if splits is None:
        splits = {"train": np.arange(n), "val": np.array([], int), "test": np.array([], int)}
    splits = {k: np.asarray(splits.get(k, []), dtype=np.int64) for k in SPLITS}
    k = int(lab.max()) + 1 if num_classes is None else num_classes
    g = Graph(adj, feats, lab, splits, k, name)
    g.validate()
    return g


def normalize_adjacency(g: Graph) -> sp.csr_matrix:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    a_hat = g.adj + sp.identity(g.n, format="csr")
    d = np.asarray(a_hat.sum(axis=1)).ravel()
    inv_sqrt = sp.diags(1.0 / np.sqrt(d))
    return (inv_sqrt @ a_hat @ inv_sqrt).tocsr()


@dataclass(frozen=True)
class Subgraph:
    """Induced BFS subgraph: ``nodes[0]`` is the root; ``adj`` is dense 0/1."""

    nodes: np.ndarray
    adj: np.ndarray

    @property
    def size(self) -> int:
        return self.nodes.size


def bfs_subgraph(g: Graph, root: int, k: int) -> Subgraph:
    """First ``k`` nodes of a BFS from ``root``, neighbours in ascending id order.

    A component smaller than ``k`` is returned whole.
    """
    if not 0 <= root < g.n:
        raise IndexError(f"root {root} outside [0, {g.n})")
    if k < 1:
        raise ValueError("k must be >= 1")
    order = [root]
    seen = {root}
    queue = deque([root])
    while queue and len(order) < k:
        u = queue.popleft()
        for v in g.neighbors(u):  # CSR indices are sorted
            v = int(v)
            if v not in seen:
                seen.add(v)
                order.append(v)
                queue.append(v)
                if len(order) == k:
                    break
    nodes = np.asarray(order, dtype=np.int64)
    adj = g.adj[nodes][:, nodes].toarray()
    return Subgraph(nodes, adj)


def sample_anchors(g: Graph, m: int, seed) -> np.ndarray:
    """``m`` distinct node ids drawn uniformly without replacement."""
    if m < 2:
        raise ValueError("need at least 2 anchors so every anchor has negatives")
    if m > g.n:
        raise ValueError(f"cannot draw {m} anchors from {g.n} nodes")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.choice(g.n, size=m, replace=False)


# ---------------------------------------------------------------- file format


def _read_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise LoadError(path, "missing file")
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _read_ids(path: Path, n: int) -> np.ndarray:
    ids = []
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        try:
            v = int(line)
        except ValueError:
            raise LoadError(path, f"not an integer: {line!r}", lineno) from None
        if not 0 <= v < n:
            raise LoadError(path, f"node id {v} outside [0, {n})", lineno)
        ids.append(v)
    return np.asarray(ids, dtype=np.int64)


def load_dataset(directory) -> Graph:
    root = Path(directory)
    if not root.is_dir():
        raise LoadError(root, "dataset directory does not exist")
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise LoadError(meta_path, "missing file")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        n, c, k = int(meta["num_nodes"]), int(meta["num_features"]), int(meta["num_classes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise LoadError(meta_path, f"bad metadata ({exc})") from None

    edges_path = root / "edges.tsv"
    edges = []
    for lineno, line in enumerate(_read_lines(edges_path), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise LoadError(edges_path, "expected two tab-separated ids", lineno)
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise LoadError(edges_path, f"not an integer pair: {line!r}", lineno) from None
        if not (0 <= u < n and 0 <= v < n):
            raise LoadError(edges_path, f"edge ({u}, {v}) outside [0, {n})", lineno)
        edges.append((u, v))
    loops = sum(1 for u, v in edges if u == v)
    if loops:
        log.warning("%s: dropped %d self-loops", edges_path, loops)

    feat_path = root / "features.tsv"
    rows = _read_lines(feat_path)
    if len(rows) != n:
        raise LoadError(feat_path, f"expected {n} rows, found {len(rows)}")
    feats = np.empty((n, c))
    for lineno, line in enumerate(rows, 1):
        parts = line.split("\t")
        if len(parts) != c:
            raise LoadError(feat_path, f"expected {c} columns, found {len(parts)}", lineno)
        try:
            feats[lineno - 1] = [float(x) for x in parts]
        except ValueError:
            raise LoadError(feat_path, "unparseable float", lineno) from None

    lab_path = root / "labels.tsv"
    lab_rows = _read_lines(lab_path)
    if len(lab_rows) != n:
        raise LoadError(lab_path, f"expected {n} rows, found {len(lab_rows)}")
    labels = np.empty(n, dtype=np.int64)
    for lineno, line in enumerate(lab_rows, 1):
        try:
            labels[lineno - 1] = int(line)
        except ValueError:
            raise LoadError(lab_path, f"not an integer: {line!r}", lineno) from None
        if not 0 <= labels[lineno - 1] < k:
            raise LoadError(lab_path, f"class id outside [0, {k})", lineno)

    splits = {s: _read_ids(root / f"split_{s}.txt", n) for s in SPLITS}
    g = Graph(
        _adjacency(n, edges), feats, labels, splits, k, str(meta.get("name", root.name))
    )
    try:
        g.validate()
    except ValueError as exc:
        raise LoadError(root, str(exc)) from None
    return g


def _adjacency(n: int, edges) -> sp.csr_matrix:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    e = e[e[:, 0] != e[:, 1]]
    both = np.concatenate([e, e[:, ::-1]])
    adj = sp.csr_matrix((np.ones(len(both)), (both[:, 0], both[:, 1])), shape=(n, n))
    adj.data[:] = 1.0
    adj.sort_indices()
    return adj


def save_dataset(g: Graph, directory) -> Path:
    """Write ``g`` in the directory format; floats round-trip exactly."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "name": g.name,
        "num_nodes": g.n,
        "num_features": g.num_features,
        "num_classes": g.num_classes,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    upper = sp.triu(g.adj, k=1).tocoo()
    order = np.lexsort((upper.col, upper.row))
    with open(root / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for r, c in zip(upper.row[order], upper.col[order]):
            fh.write(f"{r}\t{c}\n")
    with open(root / "features.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for row in g.features:
            fh.write("\t".join(repr(float(x)) for x in row) + "\n")
    with open(root / "labels.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{int(y)}\n" for y in g.labels)
    for s in SPLITS:
        with open(root / f"split_{s}.txt", "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(f"{int(i)}\n" for i in g.splits[s])
    return root


def synthetic_graph(
    n: int,
    num_classes: int = 4,
    num_features: int = 64,
    avg_degree: float = 4.0,
    homophily: float = 0.8,
    signal: float = 0.3,
    seed=0,
    name: str = "synthetic",
) -> Graph:
    """Planted-partition graph with bag-of-words style features.

    A fraction ``homophily`` of edges joins same-class nodes. Each class owns a
    block of feature columns that its nodes switch on with extra probability
    ``signal``. Splits follow the Planetoid shape: 20 training nodes per
    class, then a fifth of the rest for validation and the remainder for test.
    """
    if n < 2 or num_classes < 1:
        raise ValueError("need n >= 2 and at least one class")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, n)
    m = int(round(avg_degree * n / 2))
    src = rng.integers(0, n, m)
    same = rng.random(m) < homophily
    by_class = [np.flatnonzero(labels == c) for c in range(num_classes)]
    dst = rng.integers(0, n, m)
    for e in np.flatnonzero(same):
        pool = by_class[labels[src[e]]]
        dst[e] = pool[rng.integers(pool.size)]
    keep = src != dst
    edges = np.stack([src[keep], dst[keep]], axis=1)

    block = max(1, num_features // num_classes)
    p = np.full((n, num_features), 0.05)
    for c in range(num_classes):
        lo = (c * block) % num_features
        p[labels == c, lo : lo + block] += signal
    feats = (rng.random((n, num_features)) < p).astype(np.float64)

    order = rng.permutation(n)
    train = np.concatenate([order[labels[order] == c][:20] for c in range(num_classes)])
    rest = np.setdiff1d(order, train, assume_unique=True)
    rest = rest[rng.permutation(rest.size)]
    n_val = rest.size // 5
    splits = {"train": np.sort(train), "val": np.sort(rest[:n_val]), "test": np.sort(rest[n_val:])}
    return from_edges(n, edges, feats, labels, splits, num_classes, name)
