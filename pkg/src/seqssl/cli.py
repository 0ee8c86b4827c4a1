"""``seqssl <command> --config FILE [overrides]``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or arguments.
Every invocation writes ``run.json`` (config snapshot, seed, versions, wall
time, outputs) into its ``--out`` directory, which must be new or empty.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, load_config, parse_value
from .errors import ValidationError

log = logging.getLogger("seqssl")


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {"time": datetime.fromtimestamp(record.created, timezone.utc).isoformat(),
                 "level": record.levelname, "logger": record.name, "message": record.getMessage()}
        if record.exc_info:
            entry["exc"] = self.formatException(record.exc_info)
        return json.dumps(entry)


def _setup_logging(as_json: bool, verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if as_json else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler._seqssl = True
    root = logging.getLogger()
    root.handlers[:] = [h for h in root.handlers if not getattr(h, "_seqssl", False)] + [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--out", help="run directory (new or empty)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. pretrain.batch_size=32")
    common.add_argument("--log-json", action="store_true", help="JSON Lines logs on stderr")
    common.add_argument("--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="seqssl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"seqssl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("phantom", parents=[common], help="write a synthetic volume container")

    p = sub.add_parser("ingest", parents=[common], help="curate volumes into slices and a split manifest")
    p.add_argument("--in", dest="in_dir", help="volume container directory")
    p.add_argument("--fraction", type=float)
    p.add_argument("--planes", help="comma list, e.g. sag,cor,ax")
    p.add_argument("--size", type=int)

    for name, helptext in (("pretrain", "contrastive pre-training"), ("finetune", "label-fraction fine-tuning"),
                           ("sweep", "fraction x batch-size grid"), ("eval", "test-split evaluation"),
                           ("embed", "embedding projection plots")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--manifest", help="manifest.jsonl of a curated slice set")
        if name in ("pretrain", "finetune", "sweep"):
            p.add_argument("--epochs", type=int)
        if name in ("finetune", "eval", "embed"):
            p.add_argument("--checkpoint")
        if name in ("finetune", "sweep"):
            p.add_argument("--init", choices=("from_checkpoint", "from_scratch"))
        if name == "finetune":
            p.add_argument("--label-fraction", type=float)
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1)
            p.add_argument("--resume", action="store_true", help="continue a sweep in an existing --out")
        if name == "embed":
            p.add_argument("--method", action="append", choices=("pca", "tsne"))
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ValidationError(f"expected KEY=VALUE, got {item!r}", "--set")
        out[key.strip()] = parse_value(value.strip())
    flag_map = {"seed": "seed", "out": "out", "in_dir": "data.volumes", "fraction": "ingest.fraction",
                "size": "ingest.size", "manifest": "data.manifest", "checkpoint": "data.checkpoint",
                "init": "finetune.init", "label_fraction": "finetune.label_fraction"}
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    if getattr(args, "planes", None) is not None:
        out["ingest.planes"] = [p for p in args.planes.split(",") if p]
    if getattr(args, "epochs", None) is not None:
        stages = {"pretrain": ["pretrain"], "finetune": ["finetune"], "sweep": ["pretrain"]}[args.command]
        for stage in stages:
            out[f"{stage}.epochs"] = args.epochs
    return out


def _need(path: str | None, what: str, field: str) -> Path:
    if path is None:
        raise ValidationError(f"{what} is required", field)
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{p} does not exist", field)
    return p


def _prepare_out(out: Path, resume: bool) -> None:
    if out.exists() and any(out.iterdir()) and not resume:
        raise ValidationError(f"{out} is not empty; outputs are write-once, choose a new --out", "out")
    out.mkdir(parents=True, exist_ok=True)


def _versions() -> dict:
    import numpy
    import scipy
    import torch

    return {"seqssl": __version__, "python": platform.python_version(), "numpy": numpy.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__, "platform": platform.platform()}


# --------------------------------------------------------------------------
# commands; each returns a mapping of output names to paths or values


def cmd_phantom(cfg: ExperimentConfig, out: Path, args) -> dict:
    from .data import generate_phantom_dataset, write_volume

    vol_dir = out / "volumes"
    volumes = generate_phantom_dataset(cfg.phantom)
    for v in volumes:
        write_volume(v, vol_dir)
    log.info("wrote %d phantom volumes to %s", len(volumes), vol_dir)
    return {"volumes": str(vol_dir), "n_volumes": len(volumes)}


def cmd_ingest(cfg: ExperimentConfig, out: Path, args) -> dict:
    from .data import ingest

    src = _need(cfg.data.volumes, "a volume directory (--in or data.volumes)", "data.volumes")
    table = ingest(src, out, cfg.ingest.fraction, cfg.ingest.planes, cfg.ingest.size, cfg.ingest.ratios, cfg.seed)
    counts = {s: len(table.split(s)) for s in ("train", "val", "test")}
    log.info("ingested %d slices %s", len(table), counts)
    return {"manifest": str(out / "manifest.jsonl"), "n_slices": len(table), "split_counts": counts}


def _load_table(cfg: ExperimentConfig):
    from .data import load_slice_table

    return load_slice_table(_need(cfg.data.manifest, "a manifest (--manifest or data.manifest)", "data.manifest"))


def _load_ckpt(cfg: ExperimentConfig):
    from .model_core import load_checkpoint

    return load_checkpoint(_need(cfg.data.checkpoint, "a checkpoint (--checkpoint or data.checkpoint)",
                                 "data.checkpoint"))


def cmd_pretrain(cfg: ExperimentConfig, out: Path, args) -> dict:
    from .model_core import save_checkpoint
    from .trainer import pretrain

    ckpt = pretrain(cfg.pretrain, _load_table(cfg), cfg.model, log_path=out / "pretrain_loss.csv")
    path = save_checkpoint(ckpt, out / "pretrained.npz")
    return {"checkpoint": str(path), "loss_log": str(out / "pretrain_loss.csv"),
            "final_loss": ckpt.metadata["loss_log"][-1]["mean_loss"]}


def cmd_finetune(cfg: ExperimentConfig, out: Path, args) -> dict:
    from .model_core import save_checkpoint
    from .report import evaluate
    from .trainer import finetune

    ckpt = _load_ckpt(cfg) if cfg.finetune.init == "from_checkpoint" else None
    table = _load_table(cfg)
    tuned, acc = finetune(ckpt, cfg.finetune, table, cfg.model, log_path=out / "finetune_loss.csv")
    path = save_checkpoint(tuned, out / "finetuned.npz")
    result = evaluate(tuned, table)
    result.write(out / "eval.json")
    return {"checkpoint": str(path), "eval": str(out / "eval.json"), "accuracy": result.accuracy}


def cmd_sweep(cfg: ExperimentConfig, out: Path, args) -> dict:
    from .report import emit_table
    from .trainer import run_sweep

    grid = run_sweep(cfg.sweep.grid(), cfg.pretrain, cfg.finetune, _load_table(cfg), cfg.model, out,
                     jobs=max(1, args.jobs))
    csv_path = emit_table(grid, out / "table.csv")
    md_path = emit_table(grid, out / "table.md")
    failed = sum(c.status != "done" for c in grid.cells.values())
    return {"grid": str(out / "grid.json"), "table_csv": str(csv_path), "table_md": str(md_path),
            "failed_cells": failed}


def cmd_eval(cfg: ExperimentConfig, out: Path, args) -> dict:
    from .report import evaluate

    result = evaluate(_load_ckpt(cfg), _load_table(cfg))
    result.write(out / "eval.json")
    log.info("test accuracy %.4f over %d slices", result.accuracy, result.n_samples)
    return {"eval": str(out / "eval.json"), "accuracy": result.accuracy}


def cmd_embed(cfg: ExperimentConfig, out: Path, args) -> dict:
    from .report import extract_embeddings, project_2d, render_plot, silhouette_by_label

    ckpt = _load_ckpt(cfg)
    emb = extract_embeddings(ckpt, _load_table(cfg).split("test"))
    outputs = {"silhouette": silhouette_by_label(emb)}
    for method in args.method or ["pca"]:
        proj = project_2d(emb, method, seed=cfg.seed)
        title = f"{ckpt.stage} embeddings ({method})"
        for ext in ("png", "svg"):
            outputs[f"{method}_{ext}"] = str(render_plot(proj, out / f"embedding_{method}.{ext}", title))
    return outputs


_HANDLERS = {"phantom": cmd_phantom, "ingest": cmd_ingest, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
             "sweep": cmd_sweep, "eval": cmd_eval, "embed": cmd_embed}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    _setup_logging(args.log_json, args.verbose)
    started = time.time()
    try:
        cfg = load_config(args.config, _overrides(args))
        out = Path(cfg.out)
        _prepare_out(out, getattr(args, "resume", False))
    except ValidationError as exc:
        log.error("invalid configuration: %s", exc)
        return 2

    meta = {"command": args.command, "argv": argv, "config": cfg.to_dict(), "seed": cfg.seed,
            "versions": _versions(), "started": datetime.fromtimestamp(started, timezone.utc).isoformat()}
    code = 0
    try:
        meta["outputs"] = _HANDLERS[args.command](cfg, out, args)
        meta["status"] = "ok"
    except ValidationError as exc:
        log.error("invalid input: %s", exc)
        meta.update(status="invalid", error=str(exc))
        code = 2
    except Exception as exc:
        log.exception("%s failed", args.command)
        meta.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        code = 1
    meta["wall_time_s"] = round(time.time() - started, 3)
    name = "run.json" if not (out / "run.json").exists() else f"run_{int(started)}.json"
    (out / name).write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
