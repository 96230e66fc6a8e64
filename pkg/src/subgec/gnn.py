"""Graph encoder and the Gaussian embedding head.

encoder:  H1 = prelu(Â X Θ1),  H = prelu(Â H1 Θ2),  Â = D^-1/2 (A+I) D^-1/2
head:     H_sage = prelu(H W_self + mean_nbrs(H) W_nbr)
          μ = GAT_μ(H_sage),  log σ = clamp(GAT_σ(H_sage), ±10)
          X̃ = μ + exp(log σ) ⊙ ε,  ε ~ N(0, I)
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .graph import Graph

LOG_SIGMA_BOUND = 10.0
GAT_SLOPE = 0.2
PRELU_INIT = 0.25

PARAM_NAMES = (
    "enc_theta1",
    "enc_theta2",
    "enc_prelu1",
    "enc_prelu2",
    "sage_self",
    "sage_nbr",
    "sage_prelu",
    "mu_weight",
    "mu_att",
    "sigma_weight",
    "sigma_att",
)


@dataclass
class ModelParams:
    """Trainable weights, shapes chaining C -> F1 -> F -> F_s -> F.

    Attention vectors are stored as (2F, 1) columns; PReLU slopes as (1, 1).
    """

    enc_theta1: np.ndarray
    enc_theta2: np.ndarray
    enc_prelu1: np.ndarray
    enc_prelu2: np.ndarray
    sage_self: np.ndarray
    sage_nbr: np.ndarray
    sage_prelu: np.ndarray
    mu_weight: np.ndarray
    mu_att: np.ndarray
    sigma_weight: np.ndarray
    sigma_att: np.ndarray

    @classmethod
    def init(cls, in_dim: int, hidden: int, out_dim: int, sage_dim: int, seed=0) -> ModelParams:
        """Glorot-uniform weights, PReLU slopes at 0.25."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

        def glorot(fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_in, fan_out))

        slope = lambda: np.full((1, 1), PRELU_INIT)  # noqa: E731
        return cls(
            enc_theta1=glorot(in_dim, hidden),
            enc_theta2=glorot(hidden, out_dim),
            enc_prelu1=slope(),
            enc_prelu2=slope(),
            sage_self=glorot(out_dim, sage_dim),
            sage_nbr=glorot(out_dim, sage_dim),
            sage_prelu=slope(),
            mu_weight=glorot(sage_dim, out_dim),
            mu_att=glorot(2 * out_dim, 1),
            sigma_weight=glorot(sage_dim, out_dim),
            sigma_att=glorot(2 * out_dim, 1),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> ModelParams:
        return ModelParams(**{k: v.copy() for k, v in self.arrays().items()})

    def validate(self) -> None:
        c, f1 = self.enc_theta1.shape
        f = self.enc_theta2.shape[1]
        fs = self.sage_self.shape[1]
        expected = {
            "enc_theta2": (f1, f),
            "sage_self": (f, fs),
            "sage_nbr": (f, fs),
            "mu_weight": (fs, f),
            "sigma_weight": (fs, f),
            "mu_att": (2 * f, 1),
            "sigma_att": (2 * f, 1),
            "enc_prelu1": (1, 1),
            "enc_prelu2": (1, 1),
            "sage_prelu": (1, 1),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ad.DimensionError(f"{name}: expected {shape}, got {getattr(self, name).shape}")
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise ad.NonFiniteError(f"{name} has non-finite entries")


@dataclass
class TrackedParams:
    """The same weights as leaves of one tape."""

    tensors: dict[str, ad.Tensor]

    def __getattr__(self, name):
        try:
            return self.__dict__["tensors"][name]
        except KeyError:
            raise AttributeError(name) from None


def watch(tape: ad.Tape, params: ModelParams) -> TrackedParams:
    return TrackedParams({k: tape.watch(v) for k, v in params.arrays().items()})


@dataclass
class GaussianEmbedding:
    mu: ad.Tensor
    log_sigma: ad.Tensor
    sample: ad.Tensor
    eps: np.ndarray


def encode(g: Graph, p) -> ad.Tensor:
    """Two graph-convolution layers; returns H_conv (N x F)."""
    a_hat = g.normalized_adjacency()
    if g.num_features != p.enc_theta1.shape[0]:
        raise ad.DimensionError(
            f"features have {g.num_features} columns, encoder expects {p.enc_theta1.shape[0]}"
        )
    h1 = ad.prelu(ad.spmm(a_hat, ad.matmul(g.features, p.enc_theta1)), p.enc_prelu1)
    return ad.prelu(ad.spmm(a_hat, ad.matmul(h1, p.enc_theta2)), p.enc_prelu2)


def sage_layer(h, g: Graph, p) -> ad.Tensor:
    """Mean-aggregator GraphSAGE; isolated nodes see a zero neighbour mean."""
    nbr = ad.spmm(g.mean_adjacency(), h)
    z = ad.add(ad.matmul(h, p.sage_self), ad.matmul(nbr, p.sage_nbr))
    return ad.prelu(z, p.sage_prelu)


def gat_layer(h, g: Graph, weight, att, return_attention: bool = False):
    """Single-head attention over each node's neighbours plus itself.

    e_ij = leaky_relu(att . [W h_i || W h_j]); out_i = sum_j softmax_j(e_ij) W h_j.
    No output nonlinearity.
    """
    wh = ad.matmul(h, weight)
    f = wh.shape[1]
    if att.shape[0] != 2 * f:
        raise ad.DimensionError(f"attention vector must have length {2 * f}")
    rows, cols = g.self_loop_edges()
    s_self = ad.matmul(wh, ad.gather_rows(att, np.arange(f)))
    s_nbr = ad.matmul(wh, ad.gather_rows(att, np.arange(f, 2 * f)))
    scores = ad.leaky_relu(
        ad.add(ad.gather_rows(s_self, rows), ad.gather_rows(s_nbr, cols)), GAT_SLOPE
    )
    alpha = ad.segment_softmax(scores, rows, g.n)
    out = ad.edge_spmm(alpha, rows, cols, wh, g.n)
    if return_attention:
        return out, (rows, cols, alpha.data[:, 0])
    return out


def sge_forward(h_conv, g: Graph, p, rng=None, eps: np.ndarray | None = None) -> GaussianEmbedding:
    """μ, clamped log σ and the reparameterised sample X̃.

    ``eps`` overrides the standard-normal draw; otherwise it is drawn from
    ``rng``. The draw is a constant on the tape.
    """
    h_sage = sage_layer(h_conv, g, p)
    mu = gat_layer(h_sage, g, p.mu_weight, p.mu_att)
    log_sigma = ad.clamp(
        gat_layer(h_sage, g, p.sigma_weight, p.sigma_att), -LOG_SIGMA_BOUND, LOG_SIGMA_BOUND
    )
    if eps is None:
        if rng is None:
            raise ValueError("sge_forward needs an rng or an explicit eps")
        eps = rng.standard_normal(mu.shape)
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), mu.shape).copy()
    sample = ad.add(mu, ad.mul(ad.exp(log_sigma), eps))
    return GaussianEmbedding(mu, log_sigma, sample, eps)


def embed(g: Graph, params: ModelParams) -> np.ndarray:
    """Frozen H_conv for evaluation; no tape, no sampling."""
    return encode(g, params).data


# ---------------------------------------------------------------- checkpoints
#
# layout: b"SUBGECv1", u64 little-endian header length, UTF-8 JSON header,
# then each array as little-endian f64 in C order at its recorded offset
# (relative to the end of the header).

MAGIC = b"SUBGECv1"


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> Path:
    entries, blobs, offset = [], [], 0
    for name, arr in params.arrays().items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"arrays": entries, "extra": extra or {}}, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(raw[start : start + hlen].decode())
    body = io.BytesIO(raw[start + hlen :]).getbuffer()
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"]))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    missing = set(PARAM_NAMES) - arrays.keys()
    if missing:
        raise ValueError(f"{path}: checkpoint lacks {sorted(missing)}")
    params = ModelParams(**{k: arrays[k] for k in PARAM_NAMES})
    params.validate()
    return params, header.get("extra", {})
