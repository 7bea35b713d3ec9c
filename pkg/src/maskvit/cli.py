"""Command-line entry point: ``maskvit <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration/usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as datamod
from .bench import KERNELS, bench_attention
from .data import Dataset, DatasetError
from .maskgen import MaskParameterError, MaskScheme, PatchGrid, make_scheme
from .metrics import (
    AttentionRecord,
    CostQuery,
    attn_map_flops,
    cross_layer_similarity,
    reduction_report,
    report_text,
    write_als_csv,
    write_similarity_csv,
)
from .model import CheckpointError, ConfigError, ModelConfig, load_checkpoint, save_checkpoint
from .search import SearchConfig, SearchConfigError, probe_trainer, quick_search
from .train import TrainConfig, capture_record, evaluate, train

DEFAULT_DATA = {"task": "local", "samples": 2000, "val_samples": 500, "distractors": 3}


class RunConfig:
    """Parsed ``--config`` document: model, train, search and data sections."""

    def __init__(self, doc: dict | None = None):
        doc = dict(doc or {})
        unknown = set(doc) - {"model", "train", "search", "data"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        self.model = ModelConfig.from_dict(doc.get("model", {}))
        self.train = TrainConfig.from_dict(doc.get("train", {}))
        self.search = SearchConfig.from_dict(doc.get("search", {}))
        self.data = {**DEFAULT_DATA, **doc.get("data", {})}

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls(doc)


def _common(defaults: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    kw = {} if defaults else {"default": argparse.SUPPRESS}
    p.add_argument("--config", help="JSON run config", **({"default": None} if defaults else kw))
    p.add_argument("--seed", type=int, help="RNG seed", **({"default": None} if defaults else kw))
    p.add_argument("--out", help="output directory", **({"default": "."} if defaults else kw))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskvit", parents=[_common(True)],
                                     description="Masked-attention ViT laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common(False)

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic train/val MDAT files")
    g.add_argument("--grid", default=None, help="patch grid, e.g. 8x8")
    g.add_argument("--patch-px", type=int, default=None)
    g.add_argument("--samples", type=int, default=None)
    g.add_argument("--val-samples", type=int, default=None)
    g.add_argument("--task", choices=("local", "global"), default=None)

    t = sub.add_parser("train", parents=[common], help="train a model, write checkpoint + metrics")
    t.add_argument("--data", help="directory holding train.mdat/val.mdat (generated when omitted)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--scheme", help="sch1, sch2, sch3, none, or a scheme JSON file")

    for name, helptext in (("eval", "loss/accuracy of a checkpoint"),
                           ("als", "per-layer, per-head locality scores"),
                           ("similarity", "cross-layer attention similarity")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", help="MDAT file or directory with val.mdat")
        if name == "similarity":
            e.add_argument("--head", type=int, help="single head (default: all)")
        if name in ("als", "similarity"):
            e.add_argument("--samples", type=int, default=256)

    s = sub.add_parser("search-masks", parents=[common], help="ALS-guided quick mask search")
    s.add_argument("--data", help="directory holding train.mdat/val.mdat")

    f = sub.add_parser("flops", parents=[common], help="attention-map cost model")
    f.add_argument("--n", type=int, required=True)
    f.add_argument("--d", type=int, required=True)
    f.add_argument("--r", type=int, default=3)
    f.add_argument("--m", type=int, default=7, help="window side for windowed attention")

    b = sub.add_parser("bench", parents=[common], help="time attention kernels")
    b.add_argument("--n", type=int, default=3136)
    b.add_argument("--d", type=int, default=96)
    b.add_argument("--r", type=int, default=3)
    b.add_argument("--kernel", choices=(*KERNELS, "all"), default="all")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--warmups", type=int, default=1)
    b.add_argument("--workers", type=int, default=1)
    return parser


# --- helpers ------------------------------------------------------------------------------

def _seed(args, rc: RunConfig) -> int:
    return rc.train.seed if args.seed is None else args.seed


def _generate(rc: RunConfig, seed: int) -> tuple[Dataset, Dataset]:
    m, d = rc.model, rc.data
    n_train, n_val = int(d["samples"]), int(d["val_samples"])
    if d["task"] == "local":
        full = datamod.gen_local_task(m.grid, m.patch_px, n_train + n_val, seed, m.channels,
                                      int(d.get("distractors", DEFAULT_DATA["distractors"])))
    elif d["task"] == "global":
        full = datamod.gen_global_task(m.grid, m.patch_px, n_train + n_val, seed, m.channels)
    else:
        raise ConfigError(f"unknown data task {d['task']!r}")
    return full.split(n_train)


def _datasets(args, rc: RunConfig, seed: int) -> tuple[Dataset, Dataset]:
    if getattr(args, "data", None):
        root = Path(args.data)
        return Dataset.load(root / "train.mdat"), Dataset.load(root / "val.mdat")
    return _generate(rc, seed)


def _eval_set(args, rc: RunConfig, config: ModelConfig, seed: int) -> Dataset:
    if args.data:
        path = Path(args.data)
        return Dataset.load(path / "val.mdat" if path.is_dir() else path)
    rc.model = config
    return _generate(rc, seed)[1]


def _scheme(arg: str, config: ModelConfig) -> MaskScheme:
    if Path(arg).is_file():
        return MaskScheme.load(arg)
    return make_scheme(arg, config.layers, config.heads)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands -----------------------------------------------------------------------------

def cmd_gen_data(args, rc: RunConfig) -> None:
    if args.grid:
        rc.model = replace(rc.model, grid=PatchGrid.parse(args.grid))
    if args.patch_px:
        rc.model = replace(rc.model, patch_px=args.patch_px)
    for key in ("samples", "val_samples", "task"):
        if getattr(args, key) is not None:
            rc.data[key] = getattr(args, key)
    tr, va = _generate(rc, _seed(args, rc))
    out = _outdir(args)
    tr.save(out / "train.mdat")
    va.save(out / "val.mdat")
    print(json.dumps({"train": len(tr), "val": len(va), "image_shape": list(tr.image_shape),
                      "positives": int(tr.labels.sum() + va.labels.sum())}))


def cmd_train(args, rc: RunConfig) -> None:
    seed = _seed(args, rc)
    config = rc.model
    if args.scheme:
        config = replace(config, scheme=_scheme(args.scheme, config))
        config.validate()
    tcfg = replace(rc.train, seed=seed)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    tr, va = _datasets(args, rc, seed)
    result = train(config, tr, va, tcfg)
    out = _outdir(args)
    save_checkpoint(result.params, config, out / "checkpoint.mait", {"train": tcfg.to_dict()})
    (out / "metrics.csv").write_text(result.metrics_csv())
    if result.record is not None:
        np.save(out / "attention.npy", result.record.maps)
    last = result.history[-1] if result.history else {}
    print(json.dumps({"epochs": tcfg.epochs, "val_acc": last.get("val_acc"), "train_loss": last.get("train_loss")}))


def cmd_eval(args, rc: RunConfig) -> None:
    params, config = load_checkpoint(args.checkpoint)
    ds = _eval_set(args, rc, config, _seed(args, rc))
    res = evaluate(params, config, ds)
    out = _outdir(args)
    (out / "eval.json").write_text(json.dumps(res, sort_keys=True) + "\n")
    print(json.dumps(res))


def _record(args, rc: RunConfig) -> tuple[AttentionRecord, ModelConfig]:
    params, config = load_checkpoint(args.checkpoint)
    ds = _eval_set(args, rc, config, _seed(args, rc))
    return capture_record(params, config, ds, args.samples), config


def cmd_als(args, rc: RunConfig) -> None:
    record, _ = _record(args, rc)
    table = record.als_table(rc.search.r)
    path = _outdir(args) / "als.csv"
    write_als_csv(table, path)
    print(path.read_text(), end="")


def cmd_similarity(args, rc: RunConfig) -> None:
    record, config = _record(args, rc)
    heads = [args.head] if args.head is not None else range(config.heads)
    mats = {h: cross_layer_similarity(record, h) for h in heads}
    path = _outdir(args) / "similarity.csv"
    write_similarity_csv(mats, path)
    print(path.read_text(), end="")


def cmd_search(args, rc: RunConfig) -> None:
    seed = _seed(args, rc)
    tr, va = _datasets(args, rc, seed)
    tcfg = replace(rc.train, seed=seed, epochs=rc.search.probe_epochs)
    trainer = probe_trainer(rc.model, tr, va, tcfg, tcfg.probe_samples)
    scheme, trace = quick_search(trainer, rc.search, rc.model.layers, rc.model.heads)
    out = _outdir(args)
    scheme.save(out / "scheme.json")
    trace.save(out / "trace.json")
    print(json.dumps({"trainer_calls": trace.trainer_calls, "scheme": scheme.kinds()}))


def cmd_flops(args, rc: RunConfig) -> None:
    q = CostQuery(args.n, args.d, args.r, args.m)
    full, win, masked = (attn_map_flops(q, k) for k in ("mha", "w_mha", "m_mha"))
    row = reduction_report([q])[0]
    ratio = row["attn_map_ratio"]
    print(f"mha    2*N^2*D     = {full}")
    print(f"w_mha  2*M^2*N*D   = {win}")
    print(f"m_mha  2*R^2*N*D   = {masked}")
    print(f"m_mha/mha = {ratio.numerator}/{ratio.denominator} = {float(ratio) * 100:.3f}%")
    print(f"attention-map reduction = {row['attn_map_reduction_pct']:.3f}%")
    print(f"block: attention share {row['attn_share_pct']:.1f}%, "
          f"{row['block_flops'] / 1e9:.3f} -> {row['block_flops_masked'] / 1e9:.3f} GFLOPs "
          f"({row['block_reduction_pct']:.1f}% reduction)")
    (_outdir(args) / "flops.json").write_text(report_text([row]))


def cmd_bench(args, rc: RunConfig) -> None:
    kernels = KERNELS if args.kernel == "all" else (args.kernel,)
    for k in kernels:
        rep = bench_attention(args.n, args.d, args.r, k, args.repeats, args.warmups, args.workers,
                              _seed(args, rc))
        print(json.dumps(rep.to_dict()))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "als": cmd_als,
    "similarity": cmd_similarity,
    "search-masks": cmd_search,
    "flops": cmd_flops,
    "bench": cmd_bench,
}

CONFIG_ERRORS = (ConfigError, SearchConfigError, MaskParameterError, DatasetError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        rc = RunConfig.load(args.config)
        COMMANDS[args.command](args, rc)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
