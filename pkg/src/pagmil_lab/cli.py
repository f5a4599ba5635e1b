"""``pagmil-lab`` command line: generate / train / check / heatmap.

Precedence for every setting: built-in default < ``--config`` file < command-line flag.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from . import checkpoint as ckpt
from . import verify
from .cl_harness import (METHODS, ExperimentConfig, RunReport, _Seeds, build_datasets, export_heatmap,
                         format_table, run_experiment)
from .config import config_to_yaml, load_config, validate_config
from .errors import CheckpointError, ConfigError, InputError, PagmilError
from .mil_core import score_patches
from .prompt_guide import INTER_VARIANTS
from .synth_data import TUMOR, load_bag, save_bag

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

RUN_FILES = ("config.yaml", "report.txt", "report.json", "log.txt")
HEATMAPS_PER_TASK = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; usage errors here are 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pagmil-lab", description="Continual multiple-instance learning laboratory.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, method=True):
        sp.add_argument("--config", type=Path, help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="root seed (unsigned 64-bit)")
        if method:
            sp.add_argument("--method", choices=METHODS)
            sp.add_argument("--threads", type=int, help="max evaluation workers")
            sp.add_argument("--inter-variant", choices=INTER_VARIANTS, dest="inter_variant")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--force", action="store_true", help="replace an existing output")

    g = sub.add_parser("generate", help="write the synthetic task datasets")
    common(g, method=False)

    t = sub.add_parser("train", help="run a sequential-task experiment")
    common(t)
    t.add_argument("--data", type=Path, help="dataset directory from 'generate' (default: generate inline)")
    t.add_argument("--quiet", action="store_true", help="do not echo progress to stderr")

    c = sub.add_parser("check", help="run the gradient and oracle verification suite")
    c.add_argument("--out", type=Path, help="also write the table to this directory")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--points", type=int, default=100, help="random points per gradient check")
    # negative control: corrupt a named check on purpose
    c.add_argument("--perturb", action="append", default=[], help=argparse.SUPPRESS)

    h = sub.add_parser("heatmap", help="score one bag with a checkpoint and write a PPM heatmap")
    h.add_argument("--checkpoint", type=Path, required=True)
    h.add_argument("--bag", type=Path, required=True)
    h.add_argument("--out", type=Path, required=True, help="output .ppm file")
    h.add_argument("--force", action="store_true")
    return p


# ---------------------------------------------------------------------------

def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "method", None):
        cfg = replace(cfg, method=args.method)
    if getattr(args, "threads", None) is not None:
        cfg = replace(cfg, threads=args.threads)
    if getattr(args, "inter_variant", None):
        cfg = replace(cfg, prompt=replace(cfg.prompt, inter_variant=args.inter_variant))
    validate_config(cfg, "command line")
    return cfg


def _prepare_dir(out: Path, force: bool, owned: tuple[str, ...], owned_dirs: tuple[str, ...]) -> None:
    """Create ``out``; refuse to touch earlier results unless ``force``, then remove only our own files."""
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    present = [n for n in (*owned, *owned_dirs) if (out / n).exists()]
    if present and not force:
        raise UsageError(f"{out} already holds results ({', '.join(present)}); pass --force to replace them")
    for n in present:
        target = out / n
        if target.is_dir():
            shutil.rmtree(target)
        else:
            target.unlink()
    out.mkdir(parents=True, exist_ok=True)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# generate

def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    out = args.out
    task_dirs = tuple(f"task{t}" for t in range(cfg.n_tasks))
    _prepare_dir(out, args.force, ("manifest.json", "config.yaml"), task_dirs)
    _, data = build_datasets(cfg, _Seeds.split(cfg.seed))
    manifest = {"format": "pagmil-dataset 1", "seed": cfg.seed, "data": cfg.to_dict()["data"], "tasks": []}
    for t in range(cfg.n_tasks):
        entry = {"task_id": t, "n_classes": cfg.data.class_counts[t], "train": [], "test": []}
        for split, bags in zip(("train", "test"), data[t]):
            d = out / f"task{t}" / split
            d.mkdir(parents=True, exist_ok=True)
            for j, bag in enumerate(bags):
                f = d / f"bag_{j:05d}.txt"
                save_bag(bag, f)
                entry[split].append({"file": str(f.relative_to(out)), "label": bag.label,
                                     "sha256": _sha256(f)})
        manifest["tasks"].append(entry)
        print(f"task {t}: {len(entry['train'])} train + {len(entry['test'])} test bags, "
              f"{entry['n_classes']} classes")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "config.yaml").write_text(config_to_yaml(cfg))
    total = sum(len(e["train"]) + len(e["test"]) for e in manifest["tasks"])
    print(f"wrote {total} bag files and manifest.json to {out}")
    return EXIT_OK


def load_dataset_dir(path: Path, cfg: ExperimentConfig) -> dict:
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise UsageError(f"no manifest.json in {path}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("data") != cfg.to_dict()["data"]:
        raise ConfigError(f"{mpath}: dataset was generated with a different 'data' section than the run config")
    data = {}
    for entry in manifest["tasks"]:
        splits = []
        for split in ("train", "test"):
            splits.append([load_bag(path / item["file"]) for item in entry[split]])
        data[entry["task_id"]] = tuple(splits)
    return data


# ---------------------------------------------------------------------------
# train

def write_run(out: Path, cfg: ExperimentConfig, report: RunReport) -> None:
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(format_table([report]))
    models = report.artifacts["models"]
    if None in models:
        ckpt.save_model(models[None], out / "checkpoint.ckpt")
    else:
        for t, m in sorted(models.items()):
            ckpt.save_model(m, out / f"checkpoint-task{t}.ckpt")
    hdir = out / "heatmaps"
    hdir.mkdir(exist_ok=True)
    for t, (_, test) in sorted(report.artifacts["data"].items()):
        model = models.get(None) or models.get(t)
        if model is None:
            continue
        tumour = [(j, b) for j, b in enumerate(test) if b.label > 0][:HEATMAPS_PER_TASK]
        for j, bag in tumour:
            export_heatmap(bag, score_patches(bag, model.attn), hdir / f"task{t}_bag{j:05d}.ppm")


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = args.out
    ckpts = ("checkpoint.ckpt", *(f"checkpoint-task{t}.ckpt" for t in range(cfg.n_tasks)))
    _prepare_dir(out, args.force, (*RUN_FILES, *ckpts), ("heatmaps",))
    (out / "config.yaml").write_text(config_to_yaml(cfg))
    data = load_dataset_dir(args.data, cfg) if args.data else None

    with open(out / "log.txt", "w") as logf:
        def log(msg: str) -> None:
            logf.write(msg + "\n")
            logf.flush()
            if not args.quiet:
                print(msg, file=sys.stderr)

        log(f"pagmil-lab {__version__} method={cfg.method} seed={cfg.seed} tasks={cfg.n_tasks}")
        t0 = time.perf_counter()
        try:
            report = run_experiment(cfg, log=log, datasets=data)
        except PagmilError as exc:
            log(f"FATAL: {exc}")
            raise
        write_run(out, cfg, report)
        log(f"wall clock {time.perf_counter() - t0:.1f} s")
    print(format_table([report]), end="")
    print(f"run written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# check / heatmap

def cmd_check(args) -> int:
    try:
        results = verify.run_checks(seed=args.seed, n_points=args.points, perturb=set(args.perturb))
    except KeyError as exc:
        raise UsageError(str(exc)) from None
    table = verify.format_checks(results)
    print(table, end="")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "check.txt").write_text(table)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_heatmap(args) -> int:
    if args.out.exists() and not args.force:
        raise UsageError(f"{args.out} exists; pass --force to replace it")
    model = ckpt.load_model(args.checkpoint)
    if not args.bag.is_file():
        raise InputError(f"bag file not found: {args.bag}")
    bag = load_bag(args.bag)
    if bag.features.shape[1] != model.dim:
        raise CheckpointError(f"feature dimension mismatch: checkpoint has {model.dim}, "
                              f"bag has {bag.features.shape[1]}")
    scores = score_patches(bag, model.attn)
    export_heatmap(bag, scores, args.out)
    hot = int(scores.raw.argmax())
    r, c = bag.coords[hot]
    tag = "tumour" if bag.mask[hot] == TUMOR else "non-tumour"
    print(f"wrote {args.out} ({bag.grid_size}x{bag.grid_size}); hottest patch at ({r}, {c}) is {tag}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "check": cmd_check, "heatmap": cmd_heatmap}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PagmilError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
