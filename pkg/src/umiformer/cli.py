"""``umif`` command line: gen-data, train, eval, verify, inspect.

Configuration is layered: defaults, then ``--config FILE`` (key=value lines),
then ``UMIF_*`` environment variables, then ``--key value`` pairs given after
the subcommand. Exit codes: 0 success, 1 verification or training failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff.checkpoint import CheckpointError
from .autodiff.tensor import ContractError, no_grad
from .config import ConfigError, RunConfig, load_config
from .data import SIDES, generate_dataset, load_dataset
from .encoder import Trace
from .geometry import write_cluster_csv, write_neighbor_csv
from .train import TrainingDiverged, eval_view_order, evaluate, load_model, mean_by_views, train, write_eval_csv

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
log = logging.getLogger("umif")


class UsageError(Exception):
    pass


def _split_overrides(extra: Sequence[str]) -> dict[str, str]:
    pairs = {}
    items = list(extra)
    while items:
        key = items.pop(0)
        if not key.startswith("--") or len(key) < 3:
            raise UsageError(f"unexpected argument {key!r}; overrides look like --key value")
        key = key[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        elif items:
            value = items.pop(0)
        else:
            raise UsageError(f"--{key} needs a value")
        pairs[key] = value
    return pairs


def _parse_views(text: str) -> list[int]:
    try:
        views = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--views expects comma-separated integers, got {text!r}") from None
    if not views:
        raise UsageError("--views must list at least one view count")
    return views


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="umif", description=__doc__.split("\n")[0])
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic voxel/view dataset")
    p.add_argument("--side", type=int, help=f"voxel side, one of {SIDES} (default: voxel_size)")
    p.add_argument("--out", help="dataset directory (default: dataset)")

    p = sub.add_parser("train", help="train a model, checkpointing every epoch")
    p.add_argument("--out", help="checkpoint directory (default: checkpoints)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="IoU / F-score / Dice per view count")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--views", default="1,2,3,5,8", help="comma-separated view counts")
    p.add_argument("--split", choices=("val", "all"), default="val")
    p.add_argument("--out", help="CSV path (default: reports/eval.csv)")

    p = sub.add_parser("verify", help="run gradient, oracle and invariant suites")
    p.add_argument("suites", nargs="*", help="subset of: gradcheck oracles invariants (default: all)")
    p.add_argument("--json", help="also write the summary to this path")

    p = sub.add_parser("inspect", help="neighbour and cluster CSVs for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", type=int, required=True, help="shape seed as listed in the manifest")
    p.add_argument("--views", type=int, default=3, help="number of views fed to the encoder")
    p.add_argument("--out", help="report directory (default: reports)")
    return parser


def _config(args, extra) -> RunConfig:
    return load_config(args.config, _split_overrides(extra))


def cmd_gen_data(args, extra) -> int:
    cfg = _config(args, extra)
    side = args.side if args.side is not None else cfg.voxel_size
    if side not in SIDES:
        raise UsageError(f"side must be one of {SIDES}, got {side}")
    root = Path(args.out or cfg.dataset)
    samples = generate_dataset(root, cfg.n_shapes, side, cfg.image_size, cfg.data_seed)
    print(f"wrote {len(samples)} shapes (S={side}, {cfg.image_size}px views) to {root}")
    return EXIT_OK


def cmd_train(args, extra) -> int:
    cfg = _config(args, extra)
    out = Path(args.out or cfg.checkpoints)
    if not (Path(cfg.dataset) / "manifest.txt").exists():
        raise UsageError(f"no dataset at {cfg.dataset}; run gen-data first")
    try:
        _, history = train(cfg, out_dir=out, resume=args.resume,
                           on_epoch=lambda r: print(f"epoch {r.epoch} lr {r.lr:.3g} train {r.train_loss:.4f} val {r.val_loss:.4f}"))
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"checkpoints and loss_log.csv in {out}")
    return EXIT_OK


def _load(path):
    try:
        return load_model(path)
    except (OSError, CheckpointError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_eval(args, extra) -> int:
    views = _parse_views(args.views)
    model, cfg, _ = _load(args.checkpoint)
    cfg = load_config(args.config, _split_overrides(extra)) if (args.config or extra) else cfg
    data = load_dataset(cfg.dataset)
    total = data.views.shape[1]
    if max(views) > total or min(views) < 1:
        raise UsageError(f"view counts must lie in [1, {total}] (views stored per shape), got {views}")
    subset = data.split()[1] if args.split == "val" else data
    rows = evaluate(model, subset, views, cfg.threshold)
    out = Path(args.out or Path(cfg.reports) / "eval.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_eval_csv(out, rows)
    for n, m in mean_by_views(rows).items():
        print(f"n={n}: IoU {m['iou']:.4f}  F-score {m['fscore']:.4f}  Dice {m['dice']:.4f}")
    print(f"per-sample report: {out}")
    return EXIT_OK


def cmd_verify(args, extra) -> int:
    from .verify import SUITES, run_suites

    if extra:
        raise UsageError(f"verify takes no overrides, got {' '.join(extra)}")
    names = args.suites or list(SUITES)
    unknown = [s for s in names if s not in SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s) {', '.join(unknown)}; valid suites: {', '.join(SUITES)}")
    summary = run_suites(names)
    text = json.dumps(summary, indent=2)
    print(text)
    if args.json:
        Path(args.json).write_text(text + "\n")
    return EXIT_OK if summary["passed"] else EXIT_FAIL


def cmd_inspect(args, extra) -> int:
    model, cfg, _ = _load(args.checkpoint)
    if args.config or extra:
        cfg = load_config(args.config, _split_overrides(extra))
    data = load_dataset(cfg.dataset)
    hits = np.flatnonzero(data.seeds == args.sample)
    if hits.size == 0:
        raise UsageError(f"sample {args.sample} is not in the dataset at {cfg.dataset}")
    total = data.views.shape[1]
    if not 1 <= args.views <= total:
        raise UsageError(f"--views must lie in [1, {total}]")
    i = int(hits[0])
    views = data.views[i][eval_view_order(args.sample, total)[: args.views]]
    dtype = model.decoder.queries.dtype
    trace = Trace()
    with no_grad():
        model.encoder(np.ascontiguousarray(views[None, ..., None], dtype=dtype), trace)
    out = Path(args.out or cfg.reports)
    out.mkdir(parents=True, exist_ok=True)
    enc = cfg.encoder_config()
    for stage, found in trace.neighbors:
        path = out / f"neighbors_{args.sample}_block{stage:02d}.csv"
        with open(path, "w", newline="") as fh:
            rows = write_neighbor_csv(fh, found[0], stage)
        print(f"{path}: {rows} anchor-neighbour rows")
    if trace.clusters:
        path = out / f"clusters_{args.sample}.csv"
        with open(path, "w", newline="") as fh:
            rows = write_cluster_csv(fh, trace.clusters[0], enc.tokens_per_view, enc.grid)
        print(f"{path}: {rows} tokens in {trace.clusters[0].g} groups")
    elif cfg.merger != "stm":
        print(f"merger {cfg.merger} does not cluster; no cluster map written")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "inspect": cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args, extra)
    except (UsageError, ConfigError, ContractError, FileNotFoundError) as exc:
        print(f"umif {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
