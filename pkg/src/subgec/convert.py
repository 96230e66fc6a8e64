"""Converters from the public Planetoid and WebKB releases to the TSV directory format."""

from __future__ import annotations

import logging
import pickle
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import Graph, LoadError, from_edges

log = logging.getLogger(__name__)


def _unpickle(path: Path):
    if not path.is_file():
        raise LoadError(path, "missing file")
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def _dense(x) -> np.ndarray:
    return np.asarray(x.todense() if sp.issparse(x) else x, dtype=np.float64)


def read_planetoid(src, name: str) -> Graph:
    """Read ``ind.<name>.{x,y,tx,ty,allx,ally,graph,test.index}``.

    Follows the usual split: the first len(y) nodes train, the next 500
    (at most up to the end of ``allx``) validate, the listed test indices test. Test nodes missing from the
    feature matrix (citeseer) get zero features and class 0, and stay out of
    every split.
    """
    src = Path(src)
    parts = {k: _unpickle(src / f"ind.{name}.{k}") for k in ("x", "y", "tx", "ty", "allx", "ally", "graph")}
    idx_path = src / f"ind.{name}.test.index"
    if not idx_path.is_file():
        raise LoadError(idx_path, "missing file")
    test_idx = np.array([int(s) for s in idx_path.read_text().split()], dtype=np.int64)
    test_sorted = np.sort(test_idx)

    tx, ty = _dense(parts["tx"]), _dense(parts["ty"])
    full_range = np.arange(test_sorted[0], test_sorted[-1] + 1)
    if full_range.size != tx.shape[0]:  # isolated test ids without rows
        tx_ext = np.zeros((full_range.size, tx.shape[1]))
        tx_ext[test_sorted - test_sorted[0]] = tx
        ty_ext = np.zeros((full_range.size, ty.shape[1]))
        ty_ext[test_sorted - test_sorted[0]] = ty
        tx, ty = tx_ext, ty_ext

    feats = np.vstack([_dense(parts["allx"]), tx])
    onehot = np.vstack([_dense(parts["ally"]), ty])
    feats[test_idx] = feats[test_sorted]
    onehot[test_idx] = onehot[test_sorted]
    labels = onehot.argmax(axis=1)

    graph = parts["graph"]
    n = feats.shape[0]
    n_graph = max(max(graph), max((v for nb in graph.values() for v in nb), default=0)) + 1
    if n_graph > n:
        raise LoadError(src / f"ind.{name}.graph", f"node ids reach {n_graph - 1}, features hold {n}")
    edges = [(int(u), int(v)) for u, nb in graph.items() for v in nb if u != v]
    n_train = _dense(parts["y"]).shape[0]
    n_labelled = _dense(parts["allx"]).shape[0]
    splits = {
        "train": np.arange(n_train),
        "val": np.arange(n_train, min(n_train + 500, n_labelled)),
        "test": test_sorted,
    }
    return from_edges(n, edges, feats, labels, splits, onehot.shape[1], name)


def read_webkb(src, name: str, split_index: int = 0) -> Graph:
    """Read the geom-gcn layout: ``out1_node_feature_label.txt``,
    ``out1_graph_edges.txt`` and ``<name>_split_0.6_0.2_<i>.npz``."""
    src = Path(src)
    fpath = src / "out1_node_feature_label.txt"
    epath = src / "out1_graph_edges.txt"
    for p in (fpath, epath):
        if not p.is_file():
            raise LoadError(p, "missing file")
    rows = {}
    for lineno, line in enumerate(fpath.read_text(encoding="utf-8").splitlines()[1:], 2):
        if not line.strip():
            continue
        try:
            nid, feat, lab = line.split("\t")
            rows[int(nid)] = (np.array(feat.split(","), dtype=np.float64), int(lab))
        except ValueError:
            raise LoadError(fpath, "expected id, comma-separated features, label", lineno) from None
    n = len(rows)
    if sorted(rows) != list(range(n)):
        raise LoadError(fpath, "node ids are not 0..n-1")
    feats = np.stack([rows[i][0] for i in range(n)])
    labels = np.array([rows[i][1] for i in range(n)], dtype=np.int64)
    edges = []
    for lineno, line in enumerate(epath.read_text(encoding="utf-8").splitlines()[1:], 2):
        if line.strip():
            try:
                u, v = (int(x) for x in line.split("\t"))
            except ValueError:
                raise LoadError(epath, "expected two tab-separated ids", lineno) from None
            if u != v:
                edges.append((u, v))
    spath = src / f"{name}_split_0.6_0.2_{split_index}.npz"
    if spath.is_file():
        masks = np.load(spath)
        splits = {k: np.flatnonzero(masks[f"{k}_mask"]) for k in ("train", "val", "test")}
    else:
        log.warning("%s missing; using a seeded 60/20/20 split", spath.name)
        order = np.random.default_rng(split_index).permutation(n)
        a, b = int(0.6 * n), int(0.8 * n)
        splits = {"train": np.sort(order[:a]), "val": np.sort(order[a:b]), "test": np.sort(order[b:])}
    return from_edges(n, edges, feats, labels, splits, int(labels.max()) + 1, name)


def row_normalize(g: Graph) -> Graph:
    """Scale each feature row to unit sum; all-zero rows stay zero."""
    s = g.features.sum(axis=1, keepdims=True)
    feats = np.divide(g.features, s, out=np.zeros_like(g.features), where=s != 0)
    return Graph(g.adj, feats, g.labels, g.splits, g.num_classes, g.name)
