"""Command-line front end: ``pyramidhash <command> ...``.

Exit codes: 0 ok, 1 verification failure, 2 bad input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import StageSpec, desk_stages, paper_stages
from .checks import CHECKS, EPS, TOLERANCE, run_checks
from .data import SyntheticSpec, gen_synthetic, load_checkpoint, load_codes, load_dataset, save_checkpoint, save_codes
from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericError
from .pyramid import SOURCES, HashConfig, build_hashnet, encode_images
from .retrieval import DEFAULT_TOPN, BinaryCodeSet, evaluate, precision_within_radius, rank_database, write_report
from .training import PAPER_PROFILE, TrainConfig, train, write_trace

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    """Bad user input; reported with exit code 2."""


# ---------------------------------------------------------------- run config


@dataclass
class RunConfig:
    bits: int = 16
    backbone: str | list = "desk"
    input_size: int = 64
    manifest: str = "data/manifest.csv"
    output_dir: str = "run"
    code_source: str = "consensus"
    train: TrainConfig = field(default_factory=TrainConfig)

    def stages(self) -> list[StageSpec]:
        if self.backbone == "desk":
            return desk_stages()
        if self.backbone == "paper":
            return paper_stages()
        if isinstance(self.backbone, list):
            try:
                return [StageSpec(**s) if isinstance(s, dict) else StageSpec(int(s)) for s in self.backbone]
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"backbone: {exc}") from None
        raise ConfigError(f"backbone: expected 'desk', 'paper' or a list of stages, got {self.backbone!r}")


RUN_KEYS = ("bits", "backbone", "input_size", "manifest", "output_dir", "code_source")


def parse_run_config(raw: dict, base_dir: Path, *, profile: str = "desk") -> RunConfig:
    """Validate a JSON object; unknown keys are rejected, missing ones defaulted."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    train_keys = TrainConfig.field_names()
    unknown = sorted(set(raw) - set(RUN_KEYS) - set(train_keys))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    base = PAPER_PROFILE if profile == "paper" else TrainConfig()
    try:
        tcfg = dataclasses.replace(base, **{k: raw[k] for k in train_keys if k in raw})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig(train=tcfg, **{k: raw[k] for k in RUN_KEYS if k in raw})
    if not isinstance(cfg.bits, int):
        raise ConfigError(f"bits: expected an integer, got {cfg.bits!r}")
    HashConfig(cfg.bits)
    if cfg.code_source not in SOURCES:
        raise ConfigError(f"code_source: expected one of {SOURCES}, got {cfg.code_source!r}")
    cfg.manifest = str((base_dir / cfg.manifest).resolve())
    cfg.output_dir = str((base_dir / cfg.output_dir).resolve())
    if not Path(cfg.manifest).is_file():
        raise ConfigError(f"manifest: {cfg.manifest} does not exist")
    cfg.stages()
    return cfg


def load_run_config(path, *, profile: str = "desk") -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_run_config(raw, path.parent, profile=profile)


def _net_for(cfg: RunConfig, seed: int):
    return build_hashnet(cfg.stages(), cfg.input_size, cfg.bits, seed=seed)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        groups=args.groups,
        classes_per_group=args.classes_per_group,
        images_per_class=args.images_per_class,
        image_size=args.image_size,
        detail_size=args.detail_size,
        seed=args.seed,
    )
    manifest = gen_synthetic(spec, args.out)
    print(f"wrote {len(manifest.entries)} images to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, profile=args.profile)
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    data = load_dataset(cfg.manifest, cfg.input_size, split="train")
    if len(data.labels) == 0:
        raise UsageError(f"{cfg.manifest}: no train entries")
    net = _net_for(cfg, cfg.train.seed)
    epochs = cfg.train.epochs

    def progress(epoch, loss):
        if not args.quiet and (epoch % 10 == 0 or epoch == epochs - 1):
            print(f"epoch {epoch + 1}/{epochs} loss {loss:.6f}", flush=True)

    result = train(data.images, data.labels, net, cfg.train, on_epoch=progress)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net.parameters(), out / "checkpoint.bin")
    write_trace(result.trace, out / "loss_trace.csv")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_encode(args) -> int:
    cfg = load_run_config(args.config)
    source = args.source or cfg.code_source
    net = _net_for(cfg, 0)
    net.load_parameters(load_checkpoint(args.checkpoint))
    manifest = args.manifest or cfg.manifest
    data = load_dataset(manifest, cfg.input_size, split=args.split)
    bits = encode_images(net, data.images, source)
    codes = BinaryCodeSet.from_bits(bits, data.labels)
    save_codes(codes, args.out)
    print(f"wrote {codes.count} {cfg.bits}-bit codes to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    queries, db = load_codes(args.query), load_codes(args.db)
    if queries.q != db.q:
        raise UsageError(f"code length mismatch: queries {queries.q} bits, database {db.q} bits")
    ns = args.topn or [n for n in DEFAULT_TOPN if n <= db.count] or [db.count]
    report = evaluate(queries, db, radius=args.radius, ns=ns)
    radius_rows = [(r, precision_within_radius(queries, db, r)) for r in range(db.q + 1)]
    write_report(report, args.out, radius_rows)
    print(f"MAP {report.map:.6f}  precision@r={args.radius} {report.precision_at_radius:.6f}")
    return EXIT_OK


def cmd_query(args) -> int:
    queries, db = load_codes(args.query), load_codes(args.db)
    if queries.q != db.q:
        raise UsageError(f"code length mismatch: queries {queries.q} bits, database {db.q} bits")
    if not 0 <= args.index < queries.count:
        raise UsageError(f"--index must be in [0, {queries.count}), got {args.index}")
    res = rank_database(queries[args.index], db, args.index)
    print("rank,db_index,distance,label,relevant")
    q_label = queries.labels[args.index]
    for rank, (i, d) in enumerate(res.pairs()[: args.k], start=1):
        print(f"{rank},{i},{d},{db.labels[i]},{int(db.labels[i] == q_label)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = list(CHECKS) if args.ops == ["all"] else args.ops
    unknown = [o for o in ops if o not in CHECKS]
    if unknown:
        raise UsageError(f"unknown op(s): {', '.join(unknown)}; choose from {', '.join(CHECKS)}")
    print(f"eps {EPS:g}, tolerance {TOLERANCE:g}, seeds 0-9")
    results = run_checks(ops)
    for r in results:
        print(f"{r.op:<16} max_rel_error {r.max_error:.3e}  {r.seconds:6.2f}s  {'ok' if r.passed else 'FAIL'}")
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pyramidhash", description="Two-pyramid deep hashing: train, encode, evaluate.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic fine-grained dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--groups", type=int, default=2, help="coarse groups (default 2)")
    g.add_argument("--classes-per-group", type=int, default=4, help="classes per group (default 4)")
    g.add_argument("--images-per-class", type=int, default=40, help="images per class (default 40)")
    g.add_argument("--image-size", type=int, default=64, help="image side in pixels (default 64)")
    g.add_argument("--detail-size", type=int, default=SyntheticSpec.detail_size, help="glyph side in pixels")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model; writes checkpoint.bin and loss_trace.csv")
    t.add_argument("--config", required=True, help="JSON run config")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--profile", choices=("desk", "paper"), default="desk", help="defaults for keys missing from the config")
    t.add_argument("--quiet", action="store_true", help="no per-epoch progress")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="encode a manifest split to a code file")
    e.add_argument("--config", required=True, help="JSON run config used for training")
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--manifest", help="manifest (default: the config's)")
    e.add_argument("--split", choices=("train", "query", "all"), default="all", help="entries to encode (default all)")
    e.add_argument("--source", choices=SOURCES, help="consensus (v^c) or vertical (v) codes; default from config")
    e.add_argument("--out", required=True, help="output code file")
    e.set_defaults(func=cmd_encode)

    v = sub.add_parser("eval", help="evaluate query codes against a database")
    v.add_argument("--query", required=True, help="query code file")
    v.add_argument("--db", required=True, help="database code file")
    v.add_argument("--out", required=True, help="directory for the metric CSVs")
    v.add_argument("--radius", type=int, default=3, help="Hamming radius for precision (default 3)")
    v.add_argument("--topn", type=int, nargs="+", help="N values for precision@N")
    v.set_defaults(func=cmd_eval)

    q = sub.add_parser("query", help="print the top-k neighbours of one query code")
    q.add_argument("--query", required=True, help="query code file")
    q.add_argument("--db", required=True, help="database code file")
    q.add_argument("--index", type=int, default=0, help="which query in the file (default 0)")
    q.add_argument("-k", type=int, default=10, help="neighbours to print (default 10)")
    q.set_defaults(func=cmd_query)

    c = sub.add_parser("gradcheck", help="run the gradient checks")
    c.add_argument("--ops", nargs="+", default=["all"], help=f"'all' or any of: {', '.join(CHECKS)}")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, ContractError, DimensionError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
