"""Self-supervised training loop, linear-probe evaluation, sweeps and search."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import gnn
from .graph import Graph, bfs_subgraph, sample_anchors, synthetic_graph
from .losses import ContrastBatch, LossConfig, infonce_gw, infonce_w, kl_regularizer, total_loss
from .ot import FrankWolfe, Sinkhorn

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    subgraph_size: int = 15
    anchors_per_iter: int = 100
    alpha: float = 0.5
    beta: float = 1e-3
    tau: float = 0.5
    lr: float = 1e-2
    weight_decay: float = 0.0
    epochs: int = 100
    hidden_dim: int = 256
    out_dim: int = 128
    sage_dim: int = 128
    seed: int = 0
    w_solver: str = "exact"
    sinkhorn_eps: float = 1e-2
    fw_max_iter: int = 50

    def __post_init__(self):
        if self.subgraph_size < 1:
            raise ValueError("subgraph_size must be >= 1")
        if self.anchors_per_iter < 2:
            raise ValueError("anchors_per_iter must be >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.w_solver not in ("exact", "sinkhorn"):
            raise ValueError("w_solver must be 'exact' or 'sinkhorn'")
        self.loss_config()  # validates alpha, beta, tau

    def loss_config(self) -> LossConfig:
        return LossConfig(self.alpha, self.beta, self.tau)

    def w_solver_spec(self):
        return Sinkhorn(eps=self.sinkhorn_eps) if self.w_solver == "sinkhorn" else "exact"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: gnn.ModelParams) -> AdamState:
        arrays = params.arrays()
        return cls({k: np.zeros_like(v) for k, v in arrays.items()},
                   {k: np.zeros_like(v) for k, v in arrays.items()})


def adam_step(params: gnn.ModelParams, grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != getattr(params, name).shape:
            raise ad.DimensionError(f"gradient shape mismatch for {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        p = getattr(params, name)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------- one loss evaluation


@dataclass
class LossParts:
    loss: ad.Tensor
    l_w: float
    l_gw: float
    kl: float
    batch: ContrastBatch
    embedding: gnn.GaussianEmbedding
    h_conv: ad.Tensor


def extract_subgraphs(g: Graph, anchors, k: int):
    return [bfs_subgraph(g, int(a), k) for a in anchors]


def compute_loss(g: Graph, p, cfg: TrainConfig, rng: np.random.Generator, anchors=None,
                 eps=None) -> LossParts:
    """Forward pass of the whole objective on a fresh anchor sample."""
    lc = cfg.loss_config()
    if anchors is None:
        anchors = sample_anchors(g, min(cfg.anchors_per_iter, g.n), rng)
    subgraphs = extract_subgraphs(g, anchors, cfg.subgraph_size)
    h = gnn.encode(g, p)
    emb = gnn.sge_forward(h, g, p, rng=rng, eps=eps)
    batch = ContrastBatch.build(anchors, subgraphs, h, emb.sample)
    zero = ad.Tensor(0.0)
    l_w = infonce_w(batch, lc.tau, cfg.w_solver_spec()) if lc.alpha > 0 else zero
    l_gw = infonce_gw(batch, lc.tau, FrankWolfe(cfg.fw_max_iter)) if lc.alpha < 1 else zero
    kl = kl_regularizer(emb.mu, emb.log_sigma, batch.member_nodes())
    loss = total_loss(l_w, l_gw, kl, lc)
    return LossParts(loss, float(l_w.data), float(l_gw.data), float(kl.data), batch, emb, h)


def loss_and_grads(g: Graph, params: gnn.ModelParams, cfg: TrainConfig, rng, anchors=None,
                   eps=None):
    tape = ad.Tape()
    tracked = gnn.watch(tape, params)
    parts = compute_loss(g, tracked, cfg, rng, anchors=anchors, eps=eps)
    grads = ad.backward(tape, parts.loss)
    return parts, {k: grads[t.node] for k, t in tracked.tensors.items()}


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: gnn.ModelParams
    embeddings: np.ndarray
    trace: list[dict] = field(default_factory=list)

    def write_trace(self, path) -> None:
        cols = ["iteration", "loss", "l_w", "l_gw", "kl", "mu_abs", "sigma_dev"]
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\t".join(cols) + "\n")
            for row in self.trace:
                fh.write("\t".join(_fmt(row[c]) for c in cols) + "\n")


def _fmt(x) -> str:
    return str(x) if isinstance(x, (int, np.integer)) else repr(float(x))


def init_params(g: Graph, cfg: TrainConfig) -> gnn.ModelParams:
    return gnn.ModelParams.init(
        g.num_features, cfg.hidden_dim, cfg.out_dim, cfg.sage_dim,
        np.random.default_rng([cfg.seed, 0]),
    )


def train(g: Graph, cfg: TrainConfig, params: gnn.ModelParams | None = None,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Run ``cfg.epochs`` iterations; each samples fresh anchors and noise."""
    params = init_params(g, cfg) if params is None else params.copy()
    rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState.zeros_like(params)
    trace = []
    for it in range(cfg.epochs):
        parts, grads = loss_and_grads(g, params, cfg, rng)
        loss = float(parts.loss.data)
        if not math.isfinite(loss):
            raise TrainingDiverged(
                f"loss became {loss} at iteration {it}; config={json.dumps(cfg.to_dict())}"
            )
        nodes = parts.batch.member_nodes()
        mu = parts.embedding.mu.data[nodes]
        sigma = np.exp(parts.embedding.log_sigma.data[nodes])
        row = {
            "iteration": it,
            "loss": loss,
            "l_w": parts.l_w,
            "l_gw": parts.l_gw,
            "kl": parts.kl,
            "mu_abs": float(np.abs(mu).mean()),
            "sigma_dev": float(np.abs(sigma - 1.0).mean()),
        }
        trace.append(row)
        if callback is not None:
            callback(row)
        if cfg.weight_decay:
            for name in grads:
                grads[name] = grads[name] + cfg.weight_decay * getattr(params, name)
        try:
            adam_step(params, grads, state, cfg.lr)
        except FloatingPointError as exc:
            raise TrainingDiverged(
                f"{exc} at iteration {it}; config={json.dumps(cfg.to_dict())}"
            ) from None
    return TrainResult(params, gnn.embed(g, params), trace)


# ---------------------------------------------------------------- linear probe


@dataclass
class ProbeResult:
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def __str__(self) -> str:
        return f"{100 * self.mean:.2f}±{100 * self.std:.2f}"


@dataclass
class LinearProbe:
    """Multinomial logistic regression fitted on frozen embeddings."""

    weight: np.ndarray
    bias: np.ndarray
    val_accuracy: float
    best_step: int

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(x @ self.weight + self.bias, axis=1)

    def score(self, x: np.ndarray, labels: np.ndarray) -> float:
        """Accuracy on held-out rows; the only place test labels are read."""
        return float(np.mean(self.predict(x) == labels))


PROBE_STEPS = 300
PROBE_LR = 0.01
PROBE_L2 = 1e-4


def fit_probe(x_train, y_train, x_val, y_val, num_classes: int, seed,
              steps: int = PROBE_STEPS, lr: float = PROBE_LR, l2: float = PROBE_L2,
              optimizer: str = "gd") -> LinearProbe:
    """Full-batch softmax regression; keeps the step with the best validation accuracy.

    ``optimizer`` is "adam" (bias-corrected Adam on the full-batch gradient)
    or "gd" (plain gradient descent).
    """
    if optimizer not in ("adam", "gd"):
        raise ValueError("optimizer must be 'adam' or 'gd'")
    y_train = np.asarray(y_train)
    if np.unique(y_train).size < 2:
        raise ValueError("the training split holds a single class")
    rng = np.random.default_rng(seed)
    d = x_train.shape[1]
    w = rng.normal(0.0, 0.01, size=(d, num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y_train]
    n = len(y_train)
    mw, vw, mb, vb = np.zeros_like(w), np.zeros_like(w), np.zeros_like(b), np.zeros_like(b)
    b1, b2, eps = 0.9, 0.999, 1e-8
    has_val = len(y_val) > 0
    best = (-1.0, 0, w.copy(), b.copy())
    for t in range(1, steps + 1):
        z = x_train @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        gz = (p - onehot) / n
        gw = x_train.T @ gz + l2 * w
        gb = gz.sum(axis=0)
        if optimizer == "gd":
            w -= lr * gw
            b -= lr * gb
        else:
            mw = b1 * mw + (1 - b1) * gw
            vw = b2 * vw + (1 - b2) * gw * gw
            mb = b1 * mb + (1 - b1) * gb
            vb = b2 * vb + (1 - b2) * gb * gb
            c1, c2 = 1 - b1**t, 1 - b2**t
            w -= lr * (mw / c1) / (np.sqrt(vw / c2) + eps)
            b -= lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
        acc = float(np.mean(np.argmax(x_val @ w + b, axis=1) == y_val)) if has_val else 0.0
        if acc > best[0] or not has_val:
            best = (acc, t, w.copy(), b.copy())
    return LinearProbe(best[2], best[3], best[0], best[1])


def _probe_inputs(embeddings, labels):
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if x.shape[0] != labels.shape[0]:
        raise ValueError(f"{x.shape[0]} embedding rows for {labels.shape[0]} labels")
    return x, labels


def linear_probe(embeddings, labels, splits, num_seeds: int = 10,
                 num_classes: int | None = None, optimizer: str = "gd") -> ProbeResult:
    """Test accuracy per seed of a probe selected by validation accuracy."""
    x, labels = _probe_inputs(embeddings, labels)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    tr, va, te = splits["train"], splits["val"], splits["test"]
    accs = []
    for seed in range(num_seeds):
        probe = fit_probe(x[tr], labels[tr], x[va], labels[va], k, seed, optimizer=optimizer)
        accs.append(probe.score(x[te], labels[te]))
    return ProbeResult(accs)


def validation_probe(embeddings, labels, splits, num_seeds: int = 3,
                     num_classes: int | None = None) -> float:
    """Mean best validation accuracy; never touches the test split."""
    x, labels = _probe_inputs(embeddings, labels)
    if len(splits["val"]) == 0:
        raise ValueError("validation split is empty")
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    tr, va = splits["train"], splits["val"]
    return float(np.mean([
        fit_probe(x[tr], labels[tr], x[va], labels[va], k, seed).val_accuracy
        for seed in range(num_seeds)
    ]))


# ---------------------------------------------------------------- sweeps and search


SWEEP_PARAMS = {"beta": "beta", "k": "subgraph_size"}


@dataclass
class SweepRow:
    param: str
    value: float
    result: ProbeResult


def sensitivity_sweep(g: Graph, cfg: TrainConfig, param: str, values, probe_seeds: int = 10,
                      callback=None) -> list[SweepRow]:
    """Train and probe one model per value of ``beta`` or ``k``."""
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if param not in SWEEP_PARAMS:
        raise ValueError(f"sweep parameter must be one of {sorted(SWEEP_PARAMS)}")
    attr = SWEEP_PARAMS[param]
    rows = []
    for v in values:
        v = int(v) if attr == "subgraph_size" else float(v)
        res = train(g, replace(cfg, **{attr: v}))
        probe = linear_probe(res.embeddings, g.labels, g.splits, probe_seeds, g.num_classes)
        rows.append(SweepRow(param, v, probe))
        log.info("sweep %s=%s -> %s", param, v, probe)
        if callback is not None:
            callback(rows[-1])
    return rows


def write_sweep_tsv(rows: list[SweepRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["param", "value", "mean", "std", "accuracies"])
        for r in rows:
            w.writerow([r.param, repr(r.value), repr(r.result.mean), repr(r.result.std),
                        ",".join(repr(a) for a in r.result.accuracies)])


DEFAULT_SEARCH_SPACE = {
    "lr": ("log", 1e-4, 1e-2),
    "beta": ("log", 1e-5, 1e-1),
    "alpha": ("uniform", 0.0, 1.0),
    "tau": ("uniform", 0.2, 1.0),
    "weight_decay": ("choice", [0.0, 1e-5, 1e-4]),
}


def _sample(spec, rng: np.random.Generator):
    kind = spec[0]
    if kind == "log":
        return float(np.exp(rng.uniform(np.log(spec[1]), np.log(spec[2]))))
    if kind == "uniform":
        return float(rng.uniform(spec[1], spec[2]))
    if kind == "int":
        return int(rng.integers(spec[1], spec[2] + 1))
    if kind == "choice":
        return spec[1][int(rng.integers(len(spec[1])))]
    raise ValueError(f"unknown search range kind {kind!r}")


@dataclass
class SearchResult:
    best: TrainConfig
    best_val: float
    trials: list[dict]


def random_search(g: Graph, base: TrainConfig, space: dict | None = None, budget: int = 10,
                  seed: int = 0, probe_seeds: int = 3, callback=None) -> SearchResult:
    """Uniform random search scored by validation accuracy only."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    space = DEFAULT_SEARCH_SPACE if space is None else space
    rng = np.random.default_rng(seed)
    trials = []
    best, best_val = None, -1.0
    for t in range(budget):
        cfg = replace(base, **{k: _sample(spec, rng) for k, spec in space.items()})
        res = train(g, cfg)
        val = validation_probe(res.embeddings, g.labels, g.splits, probe_seeds, g.num_classes)
        trials.append({"trial": t, "val_accuracy": val, "config": cfg.to_dict()})
        log.info("search trial %d: val=%.4f", t, val)
        if callback is not None:
            callback(trials[-1])
        if val > best_val:
            best, best_val = cfg, val
    return SearchResult(best, best_val, trials)


# ---------------------------------------------------------------- timing


@dataclass
class BenchRow:
    nodes: int
    k: int
    trials: int
    loss_seconds: float
    step_seconds: float


def bench_loss(nodes, ks, trials: int = 3, cfg: TrainConfig | None = None, seed: int = 0,
               num_features: int = 128, callback=None) -> list[BenchRow]:
    """Mean wall-clock time of one loss evaluation (and of loss plus gradients)
    on random graphs of each size, for each subgraph size."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    cfg = TrainConfig() if cfg is None else cfg
    rows = []
    warmed = False
    for n in nodes:
        g = synthetic_graph(int(n), num_features=num_features, homophily=0.0, seed=[seed, int(n)])
        for k in ks:
            c = replace(cfg, subgraph_size=int(k), anchors_per_iter=min(cfg.anchors_per_iter, g.n))
            params = init_params(g, c)
            rng = np.random.default_rng([seed, int(n), int(k)])
            if not warmed:  # first call pays for loading compiled kernels
                compute_loss(g, params, c, rng)
                warmed = True
            fwd, step = [], []
            for _ in range(trials):
                t0 = time.perf_counter()
                compute_loss(g, params, c, rng)
                fwd.append(time.perf_counter() - t0)
                t0 = time.perf_counter()
                loss_and_grads(g, params, c, rng)
                step.append(time.perf_counter() - t0)
            rows.append(BenchRow(g.n, int(k), trials, float(np.mean(fwd)), float(np.mean(step))))
            if callback is not None:
                callback(rows[-1])
    return rows


def write_bench_tsv(rows: list[BenchRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("nodes\tk\ttrials\tloss_seconds\tstep_seconds\n")
        for r in rows:
            fh.write(f"{r.nodes}\t{r.k}\t{r.trials}\t{r.loss_seconds:.6f}\t{r.step_seconds:.6f}\n")
