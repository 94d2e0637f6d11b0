"""Command-line entry point: synth, prepare, embed, train, eval, analyze, gradcheck.

Every subcommand reads a JSON config (TrainConfig keys; relative paths resolve
against the config file) and writes its artifacts plus a run manifest into
``--out``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from .dataset import (Catalog, core_filter, generate_synthetic, ingest_interactions, ingest_item_metadata,
                      leave_one_out_split, load_split, save_split, write_interactions)
from .embeddings import assemble_item_text, hash_table, load_embedding_table, save_embedding_table, train_bpr_mf
from .encoder import load_checkpoint, save_checkpoint
from .evaluation import evaluate, export_distribution, hop_embeddings
from .graph import ITEM, USER
from .trainer import TrainConfig, fit, write_log

INTERACTIONS = "interactions.tsv"
SPLIT = "split.json"
CATALOG = "catalog.tsv"
USER_TABLE = "user_embeddings.tsv"
ITEM_TABLE = "item_embeddings.tsv"
CHECKPOINT = "checkpoint.bin"
TRAIN_LOG = "train_log.csv"
METRICS = "metrics.json"
PATH_KEYS = ("interactions", "metadata", "user_embeddings", "item_embeddings")


class CliError(Exception):
    pass


def content_hash(path) -> str:
    """Git blob hash of a file's bytes."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


class Run:
    """Collects the manifest of one subcommand invocation."""

    def __init__(self, command: str, cfg: TrainConfig, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def input(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"missing input {p}")
        self.inputs[str(p)] = content_hash(p)
        return p

    def output(self, path) -> Path:
        self.outputs[str(path)] = ""
        return Path(path)

    def timed(self, label: str, fn, *args, **kwargs):
        t = time.perf_counter()
        result = fn(*args, **kwargs)
        self.timings[label] = time.perf_counter() - t
        return result

    def manifest_path(self) -> Path:
        return self.out / ("manifest.json" if self.command == "train" else f"manifest_{self.command}.json")

    def finish(self) -> Path:
        for p in list(self.outputs):
            if Path(p).is_file():
                self.outputs[p] = content_hash(p)
        self.timings["total"] = time.perf_counter() - self._t0
        manifest = {"command": self.command, "seed": self.cfg.seed, "config": self.cfg.to_dict(),
                    "inputs": self.inputs, "outputs": self.outputs, "timings_s": self.timings}
        path = self.manifest_path()
        atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


# --------------------------------------------------------------------------
# shared loading


def load_config(args) -> TrainConfig:
    path = Path(args.config)
    if not path.is_file():
        raise CliError(f"config not found: {path}")
    cfg = TrainConfig.load(path)
    changes = {}
    for key in PATH_KEYS:
        value = getattr(cfg, key)
        if value is not None and not Path(value).is_absolute():
            changes[key] = str((path.parent / value).resolve())
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "weights", None) is not None:
        changes.update(zip(("lambda1", "lambda2", "lambda3"), args.weights))
    if getattr(args, "no_mask_seen", False):
        changes["mask_seen"] = False
    return cfg.replace(**changes) if changes else cfg


def parse_weights(text: str) -> tuple[float, float, float]:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid weights {text!r}") from None
    if len(values) != 3:
        raise argparse.ArgumentTypeError("--weights takes exactly three comma-separated values")
    return values


def _split_and_catalog(run: Run):
    split = load_split(run.input(run.out / SPLIT))
    catalog = Catalog.load(run.input(run.out / CATALOG))
    return split, catalog


def _tables(run: Run, catalog: Catalog):
    cfg = run.cfg
    user_path = cfg.user_embeddings or run.out / USER_TABLE
    item_path = cfg.item_embeddings or run.out / ITEM_TABLE
    return (load_embedding_table(run.input(user_path), USER, catalog),
            load_embedding_table(run.input(item_path), ITEM, catalog))


def _checkpoint(run: Run, args):
    if not args.checkpoint:
        raise CliError("missing checkpoint")
    model, _ = load_checkpoint(run.input(args.checkpoint), run.cfg.torch_dtype)
    return model


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(run: Run, args) -> None:
    cfg = run.cfg
    raw = run.timed("generate", generate_synthetic, cfg.synth_users, cfg.synth_items, cfg.synth_blocks,
                    cfg.synth_interactions_per_user, cfg.synth_p_in, cfg.seed)
    write_interactions(raw, run.output(run.out / INTERACTIONS))
    print(f"wrote {len(raw)} interactions to {run.out / INTERACTIONS}")


def cmd_prepare(run: Run, args) -> None:
    cfg = run.cfg
    raw = ingest_interactions(run.input(cfg.interactions or run.out / INTERACTIONS))
    ds, catalog = run.timed("core_filter", core_filter, raw, cfg.core_k)
    split = leave_one_out_split(ds)
    save_split(split, run.output(run.out / SPLIT))
    catalog.export(run.output(run.out / CATALOG))
    if cfg.metadata:
        meta = ingest_item_metadata(run.input(cfg.metadata), catalog)
        with open(run.output(run.out / "item_text.tsv"), "w", encoding="utf-8", newline="\n") as fh:
            for item, key in enumerate(catalog.item_keys):
                fh.write(f"{key}\t{assemble_item_text(meta, item)}\n")
    print(f"{catalog.num_users} users, {catalog.num_items} items, "
          f"{sum(len(s) for s in ds.sequences)} interactions after {cfg.core_k}-core filtering")


def cmd_embed(run: Run, args) -> None:
    cfg = run.cfg
    split, catalog = _split_and_catalog(run)
    if cfg.user_embeddings or cfg.item_embeddings:
        if not (cfg.user_embeddings and cfg.item_embeddings):
            raise CliError("user_embeddings and item_embeddings must be given together")
        user, item = _tables(run, catalog)
    elif cfg.embedding_source == "hash":
        user = hash_table(USER, catalog.user_keys, cfg.d1, cfg.hash_seed)
        item = hash_table(ITEM, catalog.item_keys, cfg.d1, cfg.hash_seed)
    else:
        bpr = run.timed("bpr", train_bpr_mf, split, cfg.d1, cfg.bpr_epochs, cfg.bpr_lr, cfg.seed)
        user, item = bpr.tables()
    save_embedding_table(user, catalog.user_keys, run.output(run.out / USER_TABLE))
    save_embedding_table(item, catalog.item_keys, run.output(run.out / ITEM_TABLE))
    print(f"wrote {cfg.d1}-d tables for {catalog.num_users} users and {catalog.num_items} items")


def cmd_train(run: Run, args) -> None:
    if run.manifest_path().exists() and not args.force:
        raise CliError(f"{run.manifest_path()} exists; pass --force to overwrite")
    split, catalog = _split_and_catalog(run)
    user, item = _tables(run, catalog)
    result = run.timed("fit", fit, split, run.cfg, user, item)
    save_checkpoint(run.output(run.out / CHECKPOINT), result.best_model, run.cfg.to_dict(), run.cfg.seed)
    write_log(result.log, run.output(run.out / TRAIN_LOG))
    print(f"val HR@10 {result.initial_val_hr10:.4f} -> {result.best_val_hr10:.4f} (best) "
          f"over {len(result.log)} steps")


def cmd_eval(run: Run, args) -> None:
    model = _checkpoint(run, args)
    split, _ = _split_and_catalog(run)
    rep = run.timed("evaluate", evaluate, model, split, run.cfg)
    rep.write(run.output(run.out / METRICS))
    print(json.dumps(rep.to_json(), sort_keys=True))


def cmd_analyze(run: Run, args) -> None:
    model = _checkpoint(run, args)
    split, _ = _split_and_catalog(run)
    samples = run.timed("embed", hop_embeddings, model, split, run.cfg)
    dest = run.out / "analysis"
    uniformity = run.timed("export", export_distribution, samples, dest, run.cfg.seed)
    for name in sorted(p.name for p in dest.iterdir()):
        run.output(dest / name)
    print(json.dumps(uniformity, sort_keys=True))


def cmd_gradcheck(run: Run, args) -> None:
    from .gradcheck import gradient_check

    rep = run.timed("gradcheck", gradient_check, run.cfg, run.cfg.seed)
    atomic_write(run.output(run.out / "gradcheck.json"), rep.to_json() + "\n")
    print("\n".join(rep.lines()))
    if not rep.passed:
        raise CliError(f"gradient check failed: max relative error {rep.max_error:.3e}")


COMMANDS = {"synth": cmd_synth, "prepare": cmd_prepare, "embed": cmd_embed, "train": cmd_train,
            "eval": cmd_eval, "analyze": cmd_analyze, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON config with TrainConfig keys")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--out", default=".", help="artifact directory (default: current)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="galrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("synth", parents=[common], help="generate a planted-cluster interaction file")
    sub.add_parser("prepare", parents=[common], help="5-core filter, split and catalog export")
    sub.add_parser("embed", parents=[common], help="train BPR tables or validate supplied ones")
    p = sub.add_parser("train", parents=[common], help="fit the model; writes checkpoint, log, manifest")
    p.add_argument("--force", action="store_true", help="overwrite an existing training manifest")
    p.add_argument("--weights", type=parse_weights, metavar="L1,L2,L3", help="override lambda1..3")
    p = sub.add_parser("eval", parents=[common], help="full-ranking HR/NDCG on the test targets")
    p.add_argument("--checkpoint")
    p.add_argument("--no-mask-seen", action="store_true", help="rank against every item")
    p = sub.add_parser("analyze", parents=[common], help="export hop-view distributions and uniformity")
    p.add_argument("--checkpoint")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--weights", type=parse_weights, metavar="L1,L2,L3", help="override lambda1..3")
    return parser


def run_command(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        run = Run(args.command, cfg, out)
        COMMANDS[args.command](run, args)
        run.finish()
    except (CliError, ValueError, KeyError, OSError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}".replace("\n", " "), file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
