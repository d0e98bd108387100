"""Command-line entry point: ``skelae prepare|train|eval|inspect``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric divergence.  Outputs are written only under ``--out``, which
defaults to ``$SKELAE_OUT`` or ``./skelae_out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from .autodiff import checkpoint
from .autodiff.checkpoint import CheckpointError
from .container import ContainerError
from .data import SkeletonParseError, SynthConfig, load_ntu_directory, load_split, save_split, synth_dataset
from .evaluation import (
    FINETUNE_EPOCHS,
    FINETUNE_LR,
    LEP_EPOCHS,
    extract_features,
    fine_tune,
    knn1_eval,
    linear_eval,
    rotate_test_split,
    supervised_e2e,
)
from .graph import TOPOLOGIES, named_graph
from .model import ConfigError, ModelConfig, build_model
from .training import VARIANTS, DivergenceError, TrainConfig, load_model, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
OUT_ENV = "SKELAE_OUT"
PROTOCOLS = ("1nn", "lep", "finetune", "supervised")

log = logging.getLogger("skelae")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    """Everything a run needs; the JSON file form uses these keys and rejects others."""

    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    graph: Optional[str] = None
    protocol: Optional[str] = None
    out: Optional[str] = None
    seed: Optional[int] = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise UsageError(f"unknown run config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def read(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {path}: {e}") from e

    def validate(self) -> None:
        try:
            ModelConfig.from_dict({**self.model, "joints": 1, "frames": 8})
            TrainConfig.from_dict(self.train)
            _check_data_section(self.data)
        except (TypeError, ValueError) as e:
            raise UsageError(str(e)) from e
        if self.graph is not None and self.graph not in TOPOLOGIES:
            raise UsageError(f"unknown graph topology {self.graph!r}")
        if self.protocol is not None and self.protocol not in PROTOCOLS:
            raise UsageError(f"unknown protocol {self.protocol!r}")


DATA_KEYS = {"synthetic", "ntu", "t_fixed", "split", "two_body"}


def _check_data_section(data: dict) -> None:
    unknown = set(data) - DATA_KEYS
    if unknown:
        raise UsageError(f"unknown data config keys: {sorted(unknown)}")
    if "synthetic" in data and "ntu" in data:
        raise UsageError("data config names both a synthetic and an NTU source")
    if "synthetic" in data:
        SynthConfig(**_synth_kwargs(data["synthetic"]))


def _synth_kwargs(pairs: dict) -> dict:
    known = {f.name: f.type for f in fields(SynthConfig)}
    out = {}
    for key, raw in pairs.items():
        name = key.replace("-", "_")
        if name not in known:
            raise UsageError(f"unknown synthetic parameter {key!r}; known: {sorted(known)}")
        default = getattr(SynthConfig(), name)
        try:
            out[name] = type(default)(raw)
        except ValueError as e:
            raise UsageError(f"bad value for {key}: {raw!r}") from e
    return out


def _out_dir(args, run: Optional[RunConfig] = None) -> Path:
    out = Path(args.out or (run.out if run else None) or os.environ.get(OUT_ENV) or "skelae_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_run_config(args) -> RunConfig:
    return RunConfig.read(args.config) if getattr(args, "config", None) else RunConfig()


def _load_data(path):
    try:
        return load_split(path)
    except FileNotFoundError as e:
        raise DataError(f"dataset cache not found: {path}") from e
    except ContainerError as e:
        raise DataError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    run = _load_run_config(args)
    data = run.data
    synthetic = args.synthetic
    if synthetic is None and "synthetic" in data and not args.ntu:
        synthetic = [f"{k}={v}" for k, v in data["synthetic"].items()]
    ntu = args.ntu or (data.get("ntu") if synthetic is None else None)
    if (synthetic is not None) == bool(ntu):
        raise UsageError("give exactly one of --synthetic or --ntu")
    if synthetic is not None:
        pairs = {}
        for item in synthetic:
            if "=" not in item:
                raise UsageError(f"synthetic parameters are key=value, got {item!r}")
            k, v = item.split("=", 1)
            pairs[k] = v
        if args.seed is not None:
            pairs.setdefault("seed", args.seed)
        try:
            split = synth_dataset(SynthConfig(**_synth_kwargs(pairs)))
        except ValueError as e:
            raise UsageError(str(e)) from e
    else:
        if not Path(ntu).is_dir():
            raise DataError(f"not a directory: {ntu}")
        try:
            split = load_ntu_directory(ntu, t_fixed=args.t_fixed or data.get("t_fixed", 64),
                                       kind=args.split or data.get("split", "cross-subject"),
                                       two_body=args.two_body or bool(data.get("two_body", False)))
        except SkeletonParseError as e:
            raise DataError(str(e)) from e
        except (OSError, UnicodeDecodeError, ValueError) as e:
            raise DataError(f"{ntu}: {e}") from e
    out = _out_dir(args, run)
    cache = out / args.cache
    save_split(cache, split)
    manifest = {**split.manifest(), "cache": cache.name,
                "joints": split.train[0].m if split.train else None,
                "frames": split.train[0].t if split.train else None}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {cache} ({manifest['train']} train / {manifest['test']} test)")
    return EXIT_OK


def _model_config(run: RunConfig, args, joints: int, frames: int) -> ModelConfig:
    d = dict(run.model)
    if getattr(args, "latent_dim", None) is not None:
        d["latent_dim"] = args.latent_dim
    seed = args.seed if args.seed is not None else run.seed
    if seed is not None:
        d["seed"] = seed
    d.update(joints=joints, frames=frames)
    try:
        return ModelConfig.from_dict(d)
    except (TypeError, ConfigError) as e:
        raise UsageError(str(e)) from e


def cmd_train(args) -> int:
    run = _load_run_config(args)
    split = _load_data(args.data)
    if not split.train:
        raise DataError("dataset has no training sequences")
    x0 = split.train[0]
    mcfg = _model_config(run, args, x0.m, x0.t)
    t = dict(run.train)
    overrides = {
        "epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr, "grl_lambda": args.grl_lambda,
        "ssvi_hidden": args.ssvi_hidden, "checkpoint_every": args.checkpoint_every, "combine": args.combine,
        "mu": args.mu,
    }
    t.update({k: v for k, v in overrides.items() if v is not None})
    seed = args.seed if args.seed is not None else run.seed
    if seed is not None:
        t["seed"] = seed
    variant = args.variant or TrainConfig.from_dict(t).variant
    if args.ssvi:
        variant = {"ae": "grae", "ae-l": "grae-l"}.get(variant, variant)
    try:
        tcfg = TrainConfig.for_variant(variant, **{k: v for k, v in t.items() if k not in ("laplacian", "ssvi")})
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e
    graph_name = args.graph or run.graph or split.topology
    try:
        graph = named_graph(graph_name)
        model = build_model(mcfg)
    except KeyError as e:
        raise UsageError(str(e.args[0])) from e
    except ConfigError as e:
        raise UsageError(str(e)) from e
    if tcfg.laplacian and graph.m != x0.m:
        raise UsageError(f"graph {graph_name} has {graph.m} joints but the data has {x0.m}")
    out = _out_dir(args, run)
    (out / "run_config.json").write_text(json.dumps(
        {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "graph": graph_name, "data": str(args.data)},
        indent=2, sort_keys=True) + "\n")
    try:
        result = train(model, split, graph, tcfg, checkpoint_dir=out, resume_from=args.resume)
    except DivergenceError as e:
        kept = f"; last good checkpoint {e.checkpoint}" if e.checkpoint else "; no checkpoint was written"
        print(f"training diverged: {e}{kept}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, FileNotFoundError) as e:
        raise DataError(str(e)) from e
    result.log.write(out / "trainlog.jsonl")
    final = result.log.records[-1] if result.log.records else {}
    summary = " ".join(f"{k}={final[k]:.6g}" for k in ("mse", "rskel", "ssvi") if k in final)
    print(f"variant {variant}: {result.steps} steps; {summary}; checkpoint {result.last_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = _load_run_config(args)
    protocol = args.protocol or run.protocol
    if protocol is None:
        raise UsageError("--protocol is required")
    split = _load_data(args.data)
    if args.rotate_test:
        split = rotate_test_split(split, seed=args.seed or 0)
    seed = args.seed if args.seed is not None else (run.seed or 0)
    model = None
    if protocol != "supervised" or args.checkpoint:
        if not args.checkpoint:
            raise UsageError(f"--checkpoint is required for protocol {protocol}")
        try:
            model = load_model(args.checkpoint)
        except FileNotFoundError as e:
            raise DataError(f"checkpoint not found: {args.checkpoint}") from e
        except (CheckpointError, KeyError) as e:
            raise DataError(f"{args.checkpoint}: {e}") from e
    if protocol == "1nn":
        report = knn1_eval(extract_features(model, split.train, split="train"),
                           extract_features(model, split.test, split="test"), metric=args.metric)
    elif protocol == "lep":
        report = linear_eval(extract_features(model, split.train, split="train"),
                             extract_features(model, split.test, split="test"),
                             epochs=args.epochs or LEP_EPOCHS, lr=args.lr or 1e-3, seed=seed)
    elif protocol == "finetune":
        report, _ = fine_tune(model, split, epochs=args.epochs or FINETUNE_EPOCHS, lr=args.lr or FINETUNE_LR,
                              seed=seed)
    else:
        x0 = split.train[0]
        mcfg = model.config if model is not None else _model_config(run, args, x0.m, x0.t)
        report, _ = supervised_e2e(mcfg, split, epochs=args.epochs or FINETUNE_EPOCHS,
                                   lr=args.lr or FINETUNE_LR, seed=seed)
    report.meta["rotated_test"] = bool(args.rotate_test)
    out = _out_dir(args, run)
    path = report.write(out)
    print(f"{protocol}: accuracy {report.accuracy:.4f} -> {path}")
    return EXIT_OK


def _fmt_num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else f"{v:.6g}"


def _fmt_matrix(a: np.ndarray) -> str:
    return "[" + ", ".join("[" + ", ".join(_fmt_num(v) for v in row) + "]" for row in a) + "]"


def _print_grid(name: str, a: np.ndarray, with_sums: bool = False) -> None:
    print(f"{name} =")
    width = max(len(_fmt_num(v)) for v in a.ravel())
    for row in a:
        line = " ".join(f"{_fmt_num(v):>{width}}" for v in row)
        print(f"  {line}" + (f"   | row sum {_fmt_num(row.sum())}" if with_sums else ""))


def cmd_inspect(args) -> int:
    if args.graph:
        try:
            g = named_graph(args.graph)
        except KeyError as e:
            raise DataError(str(e.args[0])) from e
        print(f"graph {args.graph}: {g.m} joints, {g.bone_count} bones")
        _print_grid("W", g.W, with_sums=True)
        print("D = diag(" + ", ".join(_fmt_num(v) for v in np.diag(g.D)) + ")")
        _print_grid("L", g.L, with_sums=True)
        print(f"L = {_fmt_matrix(g.L)}")
        print(f"trace(L) = {_fmt_num(np.trace(g.L))}")
    elif args.checkpoint:
        try:
            groups, meta = checkpoint.load(args.checkpoint)
        except FileNotFoundError as e:
            raise DataError(f"checkpoint not found: {args.checkpoint}") from e
        except CheckpointError as e:
            raise DataError(f"{args.checkpoint}: {e}") from e
        total = 0
        for group in sorted(groups):
            print(f"[{group}]")
            for name in sorted(groups[group]):
                arr = groups[group][name]
                print(f"  {name} {tuple(arr.shape)}")
                if group == "params":
                    total += arr.size
        print(f"parameters: {total}")
        if "progress" in meta:
            print(f"progress: {json.dumps(meta['progress'], sort_keys=True)}")
    elif args.data:
        split = _load_data(args.data)
        print(json.dumps(split.manifest(), indent=2, sort_keys=True))
    else:
        raise UsageError("give one of --graph, --checkpoint or --data")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="skelae", description="Skeleton autoencoders: data prep, training, evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pr = sub.add_parser("prepare", help="build a binary dataset cache and manifest")
    pr.add_argument("--synthetic", nargs="*", metavar="KEY=VALUE",
                    help="synthetic dataset parameters, e.g. classes=4 per-class=50 seed=7")
    pr.add_argument("--ntu", metavar="DIR", help="directory of NTU .skeleton files")
    pr.add_argument("--split", choices=["cross-subject", "cross-view", "cross-setup"],
                    help="NTU split rule (default cross-subject)")
    pr.add_argument("--t-fixed", type=int, help="frames after resampling, NTU only (default 64)")
    pr.add_argument("--two-body", action="store_true", help="stack two bodies into 2m joints (NTU only)")
    pr.add_argument("--cache", default="data.cache", help="cache file name inside --out")
    pr.add_argument("--config", help="JSON run config; its 'data' section names the source")
    pr.add_argument("--out")
    pr.add_argument("--seed", type=int, help="synthetic seed unless seed=N is given")
    pr.set_defaults(func=cmd_prepare)

    tr = sub.add_parser("train", help="train one of the four autoencoder variants")
    tr.add_argument("--data", required=True, help="dataset cache from 'prepare'")
    tr.add_argument("--variant", choices=sorted(VARIANTS))
    tr.add_argument("--ssvi", action="store_true", help="add the viewpoint branch to the chosen variant")
    tr.add_argument("--config", help="JSON run config; flags override it")
    tr.add_argument("--graph", choices=sorted(TOPOLOGIES), help="skeleton topology (default: the dataset's)")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--latent-dim", type=int)
    tr.add_argument("--grl-lambda", type=float)
    tr.add_argument("--ssvi-hidden", type=int)
    tr.add_argument("--combine", choices=["sequential", "weighted"])
    tr.add_argument("--mu", type=float, help="regularizer weight in weighted mode")
    tr.add_argument("--checkpoint-every", type=int, help="steps between checkpoints (0: end only)")
    tr.add_argument("--resume", help="checkpoint to resume from")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--out")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="run an evaluation protocol")
    ev.add_argument("--protocol", choices=PROTOCOLS)
    ev.add_argument("--checkpoint")
    ev.add_argument("--data", required=True)
    ev.add_argument("--config")
    ev.add_argument("--metric", default="euclidean", choices=["euclidean", "cosine"])
    ev.add_argument("--epochs", type=int)
    ev.add_argument("--lr", type=float)
    ev.add_argument("--latent-dim", type=int)
    ev.add_argument("--rotate-test", action="store_true", help="randomly rotate every test sequence")
    ev.add_argument("--seed", type=int)
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    ins = sub.add_parser("inspect", help="print a graph, checkpoint inventory or dataset manifest")
    grp = ins.add_mutually_exclusive_group(required=True)
    grp.add_argument("--graph", metavar="TOPOLOGY")
    grp.add_argument("--checkpoint")
    grp.add_argument("--data")
    ins.set_defaults(func=cmd_inspect)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"skelae: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"skelae: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
