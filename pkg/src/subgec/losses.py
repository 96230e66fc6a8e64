"""KL regulariser, OT-based InfoNCE losses and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graph import Subgraph
from .ot import distance_table

LOG_FLOOR = -700.0


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    beta: float = 1e-3
    tau: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta < 0.0:
            raise ValueError("beta must be non-negative")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")


@dataclass
class ContrastBatch:
    """Subgraph rows of H_conv (``orig``) and of X̃ (``emb``), stacked per anchor.

    Rows ``offsets[i]:offsets[i+1]`` belong to anchor ``anchors[i]`` and
    follow the node order of ``subgraphs[i]`` in both tensors.
    """

    anchors: np.ndarray
    subgraphs: list[Subgraph]
    orig: ad.Tensor
    emb: ad.Tensor
    offsets: np.ndarray

    @classmethod
    def build(cls, anchors, subgraphs, h_conv, x_tilde) -> ContrastBatch:
        if len(subgraphs) < 2:
            raise ValueError("a contrastive batch needs at least 2 anchors")
        rows = np.concatenate([s.nodes for s in subgraphs])
        offsets = np.concatenate([[0], np.cumsum([s.size for s in subgraphs])])
        return cls(
            np.asarray(anchors),
            list(subgraphs),
            ad.gather_rows(h_conv, rows),
            ad.gather_rows(x_tilde, rows),
            offsets,
        )

    @property
    def size(self) -> int:
        return len(self.subgraphs)

    def orig_feats(self, i: int) -> np.ndarray:
        return self.orig.data[self.offsets[i] : self.offsets[i + 1]]

    def emb_feats(self, i: int) -> np.ndarray:
        return self.emb.data[self.offsets[i] : self.offsets[i + 1]]

    def member_nodes(self) -> np.ndarray:
        return np.unique(np.concatenate([s.nodes for s in self.subgraphs]))


def kl_regularizer(mu, log_sigma, nodes) -> ad.Tensor:
    """(1 / 2|P|) sum_{i in P} sum_j (mu^2 + sigma^2 - 1 - 2 log sigma)."""
    nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    if nodes.size == 0:
        raise ValueError("KL needs at least one node")
    m = ad.gather_rows(mu, nodes)
    ls = ad.gather_rows(log_sigma, nodes)
    terms = ad.sub(
        ad.add(ad.mul(m, m), ad.exp(ad.scale(ls, 2.0))), ad.add(ad.scale(ls, 2.0), 1.0)
    )
    return ad.scale(ad.reduce_sum(terms), 1.0 / (2 * nodes.size))


def infonce_from_table(table, tau: float) -> ad.Tensor:
    """InfoNCE over an (S, 2S) distance table (see ``ot.distance_table``).

    Positive logit -D(orig_i, emb_i)/tau, negatives -D(orig_i, emb_j)/tau and
    -D(orig_i, orig_j)/tau for j != i; all in log space.
    """
    table = ad._as_tensor(table)
    s = table.shape[0]
    if s < 2:
        raise ValueError("InfoNCE needs at least 2 anchors")
    logits = ad.scale(table, -1.0 / tau)
    off = ~np.eye(s, dtype=bool)
    neg_lse = ad.logsumexp_rows(logits, np.hstack([off, off]))
    diag = np.hstack([np.eye(s), np.zeros((s, s))])
    pos = ad.matmul(ad.mul(logits, diag), np.ones((2 * s, 1)))
    pos = ad.clamp(pos, lo=LOG_FLOOR)
    return ad.reduce_sum(ad.sub(neg_lse, pos))


def infonce_w(batch: ContrastBatch, tau: float, solver="exact") -> ad.Tensor:
    if batch.size < 2:
        raise ValueError("InfoNCE needs at least 2 anchors")
    table = distance_table(batch.orig, batch.emb, batch.offsets, tau, "w", solver)
    return infonce_from_table(table, tau)


def infonce_gw(batch: ContrastBatch, tau: float, solver=None) -> ad.Tensor:
    """GW InfoNCE; every subgraph keeps its own adjacency for both views."""
    if batch.size < 2:
        raise ValueError("InfoNCE needs at least 2 anchors")
    table = distance_table(batch.orig, batch.emb, batch.offsets, tau, "gw", solver)
    return infonce_from_table(table, tau)


def total_loss(l_w, l_gw, kl, cfg: LossConfig) -> ad.Tensor:
    """alpha L_W + (1 - alpha) L_GW + beta KL."""
    parts = []
    if cfg.alpha != 0.0:
        parts.append(ad.scale(l_w, cfg.alpha))
    if cfg.alpha != 1.0:
        parts.append(ad.scale(l_gw, 1.0 - cfg.alpha))
    if cfg.beta != 0.0:
        parts.append(ad.scale(kl, cfg.beta))
    if not parts:
        return ad.scale(l_w, 0.0)
    out = parts[0]
    for p in parts[1:]:
        out = ad.add(out, p)
    return out
