"""``subgec`` command line: datasets, training, probing, sweeps, search and OT timing."""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gnn, trainer
from .autodiff import DimensionError, DomainError, NonFiniteError
from .graph import LoadError, load_dataset, save_dataset

log = logging.getLogger("subgec")


class CliError(Exception):
    pass


USER_ERRORS = (
    CliError,
    LoadError,
    trainer.TrainingDiverged,
    DimensionError,
    DomainError,
    NonFiniteError,
    ValueError,
    OSError,
)


# ---------------------------------------------------------------- file helpers


def write_embeddings(emb: np.ndarray, path) -> Path:
    """One row per node: id, then F floats at full precision; tab separated."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, row in enumerate(emb):
            fh.write(str(i) + "\t" + "\t".join("%.17g" % x for x in row) + "\n")
    return path


def read_embeddings(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise LoadError(path, "missing file")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").split("\n"), 1):
        if not line:
            continue
        parts = line.split("\t")
        try:
            nid = int(parts[0])
            vals = [float(x) for x in parts[1:]]
        except ValueError:
            raise LoadError(path, "unparseable row", lineno) from None
        if nid != len(rows):
            raise LoadError(path, f"expected node id {len(rows)}, found {nid}", lineno)
        if rows and len(vals) != len(rows[0]):
            raise LoadError(path, "ragged row", lineno)
        rows.append(vals)
    if not rows:
        raise LoadError(path, "no rows")
    return np.asarray(rows, dtype=np.float64)


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _load_config(path, seed=None) -> trainer.TrainConfig:
    if path is None:
        cfg = trainer.TrainConfig()
    else:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"{p}: config file not found")
        try:
            cfg = trainer.TrainConfig.from_json(p)
        except (ValueError, TypeError) as exc:
            raise CliError(f"{p}: {exc}") from None
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _parse_list(text: str, kind=float) -> list:
    try:
        vals = [kind(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise CliError(f"cannot parse list {text!r}") from None
    if not vals:
        raise CliError("empty value list")
    return vals


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    g = load_dataset(args.data)
    cfg = _load_config(args.config, args.seed)
    out = _out_dir(args.out)
    files = {
        "checkpoint": out / "model.ckpt",
        "embeddings": out / "embeddings.tsv",
        "loss_trace": out / "loss_trace.tsv",
    }
    manifest = {
        "config": cfg.to_dict(),
        "data": str(Path(args.data).resolve()),
        "git": _git_describe(),
        "seed": cfg.seed,
        "started": _now(),
        "finished": None,
        "outputs": {k: v.name for k, v in files.items()},
    }
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")

    def progress(row):
        if row["iteration"] % 10 == 0:
            log.info("iter %d loss %.5f kl %.4f", row["iteration"], row["loss"], row["kl"])

    res = trainer.train(g, cfg, callback=progress)
    gnn.save_checkpoint(res.params, files["checkpoint"], extra={"config": cfg.to_dict()})
    write_embeddings(res.embeddings, files["embeddings"])
    res.write_trace(files["loss_trace"])
    manifest["finished"] = _now()
    mpath.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out}")
    return 0


def cmd_probe(args) -> int:
    g = load_dataset(args.data)
    emb = read_embeddings(args.embeddings)
    if emb.shape[0] != g.n:
        raise CliError(f"{args.embeddings}: {emb.shape[0]} rows for a graph of {g.n} nodes")
    res = trainer.linear_probe(emb, g.labels, g.splits, args.seeds, g.num_classes)
    print(res)
    out = Path(args.out) if args.out else Path(args.embeddings).with_name("probe.tsv")
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("seed\taccuracy\n")
        for s, a in enumerate(res.accuracies):
            fh.write(f"{s}\t{a!r}\n")
        fh.write(f"mean\t{res.mean!r}\nstd\t{res.std!r}\n")
    return 0


def cmd_sweep(args) -> int:
    from . import plotting

    g = load_dataset(args.data)
    cfg = _load_config(args.config, args.seed)
    kind = int if args.param == "k" else float
    values = _parse_list(args.values, kind)
    out = _out_dir(args.out)
    rows = trainer.sensitivity_sweep(
        g, cfg, args.param, values, args.seeds,
        callback=lambda r: print(f"{r.param}={r.value}\t{r.result}", flush=True),
    )
    trainer.write_sweep_tsv(rows, out / f"sweep_{args.param}.tsv")
    plotting.plot_sweep(rows, out / f"sweep_{args.param}.png")
    return 0


def cmd_search(args) -> int:
    from . import plotting

    g = load_dataset(args.data)
    cfg = _load_config(args.config)
    out = _out_dir(args.out)
    res = trainer.random_search(
        g, cfg, budget=args.budget, seed=args.seed, probe_seeds=args.probe_seeds,
        callback=lambda t: print(f"trial {t['trial']}\tval {100 * t['val_accuracy']:.2f}", flush=True),
    )
    (out / "best_config.json").write_text(json.dumps(res.best.to_dict(), indent=2) + "\n", encoding="utf-8")
    with open(out / "search.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("trial\tval_accuracy\tconfig\n")
        for t in res.trials:
            fh.write(f"{t['trial']}\t{t['val_accuracy']!r}\t{json.dumps(t['config'], sort_keys=True)}\n")
    plotting.plot_search(res.trials, out / "search.png")
    print(f"best val {100 * res.best_val:.2f}; config in {out / 'best_config.json'}")
    return 0


def cmd_bench_ot(args) -> int:
    from . import plotting

    nodes = _parse_list(args.nodes, int)
    ks = _parse_list(args.k, int)
    cfg = _load_config(args.config)
    out = _out_dir(args.out)
    rows = trainer.bench_loss(
        nodes, ks, args.trials, cfg, seed=args.seed,
        callback=lambda r: print(f"N={r.nodes}\tk={r.k}\t{r.loss_seconds:.4f}s", flush=True),
    )
    trainer.write_bench_tsv(rows, out / "bench_ot.tsv")
    plotting.plot_bench(rows, out / "bench_ot.png")
    return 0


def cmd_embed(args) -> int:
    g = load_dataset(args.data)
    params, _ = gnn.load_checkpoint(args.checkpoint)
    write_embeddings(gnn.embed(g, params), args.out)
    return 0


def cmd_convert(args) -> int:
    from . import convert

    if args.format == "planetoid":
        g = convert.read_planetoid(args.src, args.name)
    else:
        g = convert.read_webkb(args.src, args.name, args.split_index)
    if args.row_normalize:
        g = convert.row_normalize(g)
    save_dataset(g, args.out)
    print(f"{g.name}: {g.n} nodes, {g.num_edges} edges -> {args.out}")
    return 0


def cmd_inspect(args) -> int:
    g = load_dataset(args.data)
    deg = g.degrees()
    adj = g.adj.tocoo()
    same = float(np.mean(g.labels[adj.row] == g.labels[adj.col])) if adj.nnz else float("nan")
    print(f"name\t{g.name}")
    print(f"nodes\t{g.n}")
    print(f"edges\t{g.num_edges}")
    print(f"features\t{g.num_features}")
    print(f"classes\t{g.num_classes}")
    print(f"isolated\t{int(np.sum(deg == 0))}")
    print(f"mean_degree\t{deg.mean():.3f}")
    print(f"edge_homophily\t{same:.3f}")
    for s, idx in g.splits.items():
        print(f"split_{s}\t{len(idx)}")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subgec", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and export embeddings")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("probe", help="linear-probe accuracy of an embeddings file")
    pr.add_argument("--embeddings", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--seeds", type=int, default=10)
    pr.add_argument("--out", help="TSV path (default: probe.tsv next to the embeddings)")
    pr.set_defaults(func=cmd_probe)

    sw = sub.add_parser("sweep", help="sensitivity sweep over beta or k")
    sw.add_argument("--data", required=True)
    sw.add_argument("--config")
    sw.add_argument("--param", required=True, choices=sorted(trainer.SWEEP_PARAMS))
    sw.add_argument("--values", required=True, help="comma or space separated")
    sw.add_argument("--seeds", type=int, default=10)
    sw.add_argument("--seed", type=int)
    sw.add_argument("--out", required=True)
    sw.set_defaults(func=cmd_sweep)

    se = sub.add_parser("search", help="random hyperparameter search on the validation split")
    se.add_argument("--data", required=True)
    se.add_argument("--config")
    se.add_argument("--budget", type=int, default=10)
    se.add_argument("--seed", type=int, default=0)
    se.add_argument("--probe-seeds", type=int, default=3)
    se.add_argument("--out", required=True)
    se.set_defaults(func=cmd_search)

    b = sub.add_parser("bench-ot", help="time one loss evaluation on random graphs")
    b.add_argument("--nodes", default="100,500,1000,1500,2000,2500")
    b.add_argument("--k", default="5,14,31")
    b.add_argument("--trials", type=int, default=3)
    b.add_argument("--config")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench_ot)

    e = sub.add_parser("embed", help="export H_conv embeddings from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_embed)

    c = sub.add_parser("convert", help="convert a Planetoid or WebKB release")
    c.add_argument("--format", required=True, choices=["planetoid", "webkb"])
    c.add_argument("--src", required=True)
    c.add_argument("--name", required=True)
    c.add_argument("--split-index", type=int, default=0)
    c.add_argument("--row-normalize", action="store_true")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_convert)

    i = sub.add_parser("inspect", help="print dataset statistics")
    i.add_argument("--data", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
