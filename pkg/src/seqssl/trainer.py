"""Contrastive pre-training, label-fraction fine-tuning and sweep grids."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import AugmentConfig, make_view_batch
from .data import LABEL_INDEX, SliceTable, SplitManifest, UnlabeledSlices, normalize_intensity, resample_slice
from .errors import ValidationError, require
from .model_core import (MIN_INPUT_SIZE, Checkpoint, ModelSpec, SeqSSLModel, build_model,
                         checkpoint_from_model, load_checkpoint, load_model, save_checkpoint)
from .objectives import DEFAULT_TEMPERATURE, cross_entropy_torch, interleave_views, nt_xent_torch, simsiam_torch

log = logging.getLogger(__name__)

FRAMEWORKS = ("simclr", "simsiam")
INITS = ("from_checkpoint", "from_scratch")
REFERENCE_BATCH_SIZES = (64, 128, 256, 512, 1024, 2048)
REFERENCE_FRACTIONS = (0.005, 0.01, 0.05, 0.5, 1.0)
DESK_BATCH_SIZES = (8, 16, 32)


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    lr: float | None = None  # None: 0.03 * batch_size / 256
    weight_decay: float = 1e-4
    momentum: float = 0.9
    cosine: bool = True

    def validate(self, prefix: str) -> "OptimizerConfig":
        require(self.kind in ("sgd", "adam"), f"unknown optimizer {self.kind!r}", f"{prefix}.kind")
        require(self.lr is None or self.lr > 0, "must be > 0", f"{prefix}.lr")
        require(self.weight_decay >= 0, "must be >= 0", f"{prefix}.weight_decay")
        require(0 <= self.momentum < 1, "must lie in [0, 1)", f"{prefix}.momentum")
        return self

    def learning_rate(self, batch_size: int) -> float:
        return self.lr if self.lr is not None else 0.03 * batch_size / 256


@dataclass
class PretrainConfig:
    framework: str = "simsiam"
    epochs: int = 50
    batch_size: int = 64
    resolution: int = 84
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    temperature: float = DEFAULT_TEMPERATURE
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def validate(self) -> "PretrainConfig":
        require(self.framework in FRAMEWORKS, f"unknown framework {self.framework!r}", "pretrain.framework")
        require(int(self.epochs) >= 1, f"must be >= 1, got {self.epochs}", "pretrain.epochs")
        min_batch = 2 if self.framework == "simclr" else 1
        require(int(self.batch_size) >= min_batch,
                f"must be >= {min_batch} for {self.framework}", "pretrain.batch_size")
        require(int(self.resolution) >= MIN_INPUT_SIZE, f"must be >= {MIN_INPUT_SIZE}", "pretrain.resolution")
        require(self.temperature > 0, "must be > 0", "pretrain.temperature")
        self.optimizer.validate("pretrain.optimizer")
        self.augment.validate()
        return self


@dataclass
class FinetuneConfig:
    label_fraction: float = 1.0
    init: str = "from_checkpoint"
    epochs: int = 30
    batch_size: int = 32
    patience: int = 10
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=0.01))
    seed: int = 0

    def validate(self) -> "FinetuneConfig":
        require(0 < self.label_fraction <= 1, f"must lie in (0, 1], got {self.label_fraction}",
                "finetune.label_fraction")
        require(self.init in INITS, f"must be one of {INITS}", "finetune.init")
        require(int(self.epochs) >= 1, f"must be >= 1, got {self.epochs}", "finetune.epochs")
        require(int(self.batch_size) >= 2, "must be >= 2", "finetune.batch_size")
        require(int(self.patience) >= 1, "must be >= 1", "finetune.patience")
        self.optimizer.validate("finetune.optimizer")
        return self


# --------------------------------------------------------------------------
# helpers


def _batches(n: int, batch_size: int, rng: np.random.Generator, drop_last: bool) -> list[np.ndarray]:
    order = rng.permutation(n)
    if drop_last and n >= batch_size:
        return [order[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # batch norm cannot train on a single sample
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def _optimizer(params, cfg: OptimizerConfig, batch_size: int) -> torch.optim.Optimizer:
    lr = cfg.learning_rate(batch_size)
    if cfg.kind == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _scheduler(opt, cfg: OptimizerConfig, total_steps: int):
    if not cfg.cosine:
        return None
    return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, total_steps))


def _at_resolution(pixels: np.ndarray, size: int) -> np.ndarray:
    if pixels.shape[-1] == size and pixels.shape[-2] == size:
        return pixels
    return np.stack([normalize_intensity(resample_slice(p, (size, size))) for p in pixels]).astype(np.float32)


def _to_tensor(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)).unsqueeze(1)


def write_loss_log(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "val_metric"])
        for r in rows:
            val = r.get("val_metric")
            w.writerow([r["epoch"], f"{r['mean_loss']:.6f}", "" if val is None else f"{val:.6f}"])
    return path


# --------------------------------------------------------------------------
# pre-training


def pretrain(config: PretrainConfig, data: SliceTable | UnlabeledSlices, model_spec: ModelSpec,
             log_path: str | Path | None = None) -> Checkpoint:
    """Contrastive pre-training on the train split; labels are never read.

    A :class:`SliceTable` is reduced to its train split and stripped to
    :class:`UnlabeledSlices` before anything else happens. An
    ``UnlabeledSlices`` argument is taken to be train data already.
    """
    config.validate()
    model_spec.validate()
    if isinstance(data, SliceTable):
        data = data.split("train").unlabeled()
    require(len(data) > 0, "train split is empty")
    if config.framework == "simclr":
        require(len(data) >= 2, "SimCLR needs at least two slices")
    pixels = _at_resolution(data.pixels, config.resolution)
    aug_cfg = config.augment.scaled_to(config.resolution)

    torch.manual_seed(config.seed)
    model = build_model(model_spec, config.seed)
    model.train()
    params = [p for n, p in model.named_parameters() if not n.startswith("classifier.")]
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = len(_batches(len(pixels), config.batch_size, np.random.default_rng(0), True))
    opt = _optimizer(params, config.optimizer, config.batch_size)
    sched = _scheduler(opt, config.optimizer, steps_per_epoch * config.epochs)

    history = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for idx in _batches(len(pixels), config.batch_size, rng, drop_last=True):
            if config.framework == "simclr" and len(idx) < 2:
                continue
            pair_seeds = rng.integers(0, 2**63 - 1, size=len(idx))
            a, b = make_view_batch(pixels[idx], aug_cfg, pair_seeds)
            loss = _contrastive_step(model, config, _to_tensor(a), _to_tensor(b))
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite {config.framework} loss {loss.item()} at epoch {epoch}; "
                                    f"lr={opt.param_groups[0]['lr']:.3g}, batch={len(idx)}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            losses.append(loss.item())
        mean_loss = float(np.mean(losses))
        history.append({"epoch": epoch, "mean_loss": mean_loss, "val_metric": None})
        log.info("pretrain %s epoch %d/%d loss %.4f (%.1fs)", config.framework, epoch, config.epochs,
                 mean_loss, time.perf_counter() - t0)
    if log_path is not None:
        write_loss_log(history, log_path)
    return checkpoint_from_model(model, "pretrained", config.epochs, config.seed,
                                 framework=config.framework, resolution=config.resolution,
                                 batch_size=config.batch_size, loss_log=history)


def _contrastive_step(model: SeqSSLModel, config: PretrainConfig, a: torch.Tensor, b: torch.Tensor):
    if config.framework == "simclr":
        z = model.forward_project(model.forward_embed(torch.cat([a, b])))
        za, zb = z[: len(a)], z[len(a):]
        return nt_xent_torch(interleave_views(za, zb), config.temperature)
    z1 = model.forward_project(model.forward_embed(a))
    z2 = model.forward_project(model.forward_embed(b))
    p1, p2 = model.forward_predict(z1), model.forward_predict(z2)
    return simsiam_torch(p1, p2, z1, z2)


# --------------------------------------------------------------------------
# fine-tuning


def subsample_labels(manifest: SplitManifest, fraction: float, seed: int) -> SplitManifest:
    """Keep ``max(1, round(fraction * S_c))`` train studies per class.

    Val and test entries pass through untouched. Each class draws one
    permutation of its sorted study ids from a single seeded stream, so the
    subsets are nested as the fraction grows.
    """
    require(0 < fraction <= 1, f"fraction must lie in (0, 1], got {fraction}")
    studies: dict[str, set[str]] = {}
    present = set()
    for e in manifest.entries:
        present.add(e.label)
        if e.split == "train":
            studies.setdefault(e.label, set()).add(e.study_id)
    rng = np.random.default_rng(seed)
    keep = set()
    for label in sorted(present, key=LABEL_INDEX.get):
        if label not in studies:
            raise ValidationError(f"class {label} has no train studies")
        ids = sorted(studies[label])
        k = max(1, int(math.floor(fraction * len(ids) + 0.5)))
        perm = rng.permutation(len(ids))
        keep.update(ids[i] for i in perm[:k])
    return manifest.select(lambda e: e.split != "train" or e.study_id in keep)


@torch.no_grad()
def predict_logits(model: SeqSSLModel, pixels: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = [model(_to_tensor(pixels[i:i + batch_size])) for i in range(0, len(pixels), batch_size)]
    return torch.cat(out).numpy()


@torch.no_grad()
def embed(model: SeqSSLModel, pixels: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = [model.forward_embed(_to_tensor(pixels[i:i + batch_size])) for i in range(0, len(pixels), batch_size)]
    return torch.cat(out).numpy()


def accuracy(model: SeqSSLModel, table: SliceTable) -> float:
    return float(np.mean(predict_logits(model, table.pixels).argmax(axis=1) == table.labels))


def finetune(checkpoint: Checkpoint | None, config: FinetuneConfig, data: SliceTable,
             model_spec: ModelSpec, log_path: str | Path | None = None) -> tuple[Checkpoint, float]:
    """Supervised fine-tuning of every parameter on a label fraction of the train split.

    The epoch with the best validation accuracy (earliest on ties) is kept
    and scored on the test split. ``from_scratch`` ignores ``checkpoint``.
    """
    config.validate()
    model_spec.validate()
    if config.init == "from_checkpoint":
        require(checkpoint is not None, "from_checkpoint needs a checkpoint")
        require(checkpoint.stage == "pretrained", f"expected a pretrained checkpoint, got {checkpoint.stage}")
        model = load_model(checkpoint, model_spec, init_seed=config.seed)
        resolution = int(checkpoint.metadata.get("resolution", data.resolution))
    else:
        model = build_model(model_spec, config.seed)
        resolution = data.resolution
    data = data.at_resolution(resolution)

    subset = subsample_labels(data.manifest, config.label_fraction, config.seed)
    train = data.restrict(subset).split("train")
    val, test = data.split("val"), data.split("test")
    require(len(train) > 0, "no labeled train slices")
    require(len(val) > 0, "validation split is empty")
    require(len(test) > 0, "test split is empty")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    x_train, y_train = train.pixels, torch.from_numpy(train.labels)
    steps = len(_batches(len(train), config.batch_size, np.random.default_rng(0), False))
    opt = _optimizer(model.parameters(), config.optimizer, config.batch_size)
    sched = _scheduler(opt, config.optimizer, steps * config.epochs)

    best_acc, best_epoch, best_state = -1.0, 0, None
    history = []
    for epoch in range(1, config.epochs + 1):
        model.train()
        losses = []
        for idx in _batches(len(train), config.batch_size, rng, drop_last=False):
            logits = model(_to_tensor(x_train[idx]))
            loss = cross_entropy_torch(logits, y_train[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite fine-tuning loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            losses.append(loss.item())
        val_acc = accuracy(model, val)
        history.append({"epoch": epoch, "mean_loss": float(np.mean(losses)), "val_metric": val_acc})
        if val_acc > best_acc:
            best_acc, best_epoch, best_state = val_acc, epoch, copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= config.patience:
            break
    model.load_state_dict(best_state)
    test_acc = accuracy(model, test)
    if log_path is not None:
        write_loss_log(history, log_path)
    log.info("finetune %s fraction %.3g: best epoch %d val %.3f test %.3f", config.init,
             config.label_fraction, best_epoch, best_acc, test_acc)
    ckpt = checkpoint_from_model(model, "finetuned", best_epoch, config.seed, init=config.init,
                                 label_fraction=config.label_fraction, resolution=resolution,
                                 val_accuracy=best_acc, test_accuracy=test_acc, loss_log=history,
                                 n_train_slices=len(train))
    return ckpt, test_acc


# --------------------------------------------------------------------------
# sweeps


def fraction_label(f: float) -> str:
    return f"{f * 100:g}%"


@dataclass
class GridSpec:
    """Rows are label fractions; columns are ``(batch_size, resolution)`` pairs.

    ``kind="batch"`` labels columns by batch size alone (the batch-size
    tables); ``kind="batch_resolution"`` labels them ``"<batch>_<resolution>"``.
    """

    fractions: tuple[float, ...] = REFERENCE_FRACTIONS
    columns: tuple[tuple[int, int], ...] = tuple((b, 84) for b in REFERENCE_BATCH_SIZES)
    kind: str = "batch"

    def column_label(self, col: tuple[int, int]) -> str:
        return str(col[0]) if self.kind == "batch" else f"{col[0]}_{col[1]}"

    @property
    def column_labels(self) -> list[str]:
        return [self.column_label(c) for c in self.columns]

    @classmethod
    def batch_sweep(cls, batch_sizes=REFERENCE_BATCH_SIZES, resolution=84, fractions=REFERENCE_FRACTIONS):
        return cls(tuple(fractions), tuple((int(b), int(resolution)) for b in batch_sizes), "batch")

    @classmethod
    def resolution_sweep(cls, batch_sizes=(64, 128), resolutions=(84, 256), fractions=REFERENCE_FRACTIONS):
        cols = tuple((int(b), int(r)) for b in batch_sizes for r in resolutions)
        return cls(tuple(fractions), cols, "batch_resolution")

    @classmethod
    def from_codes(cls, codes: Sequence[str], fractions=REFERENCE_FRACTIONS):
        cols = []
        for code in codes:
            b, _, r = str(code).partition("_")
            require(b.isdigit() and r.isdigit(), f"cell code {code!r} is not <batch>_<resolution>")
            cols.append((int(b), int(r)))
        return cls(tuple(fractions), tuple(cols), "batch_resolution")


@dataclass
class CellResult:
    cell_id: str
    status: str  # "done" | "failed"
    accuracy: float | None = None
    checkpoint: str | None = None
    seed: int = 0
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunGrid:
    title: str
    row_labels: list[str]
    column_labels: list[str]
    cells: dict[tuple[str, str], CellResult] = field(default_factory=dict)

    def value(self, row: str, col: str) -> float | None:
        cell = self.cells.get((row, col))
        return cell.accuracy if cell is not None and cell.status == "done" else None

    def as_array(self) -> np.ndarray:
        return np.array([[np.nan if self.value(r, c) is None else self.value(r, c) for c in self.column_labels]
                         for r in self.row_labels], dtype=float)

    def validate(self) -> "RunGrid":
        for key, cell in self.cells.items():
            require(key[0] in self.row_labels and key[1] in self.column_labels, f"cell {key} outside axes")
            if cell.accuracy is not None:
                require(0.0 <= cell.accuracy <= 1.0, f"cell {key} accuracy {cell.accuracy} outside [0, 1]")
        return self

    def to_dict(self) -> dict:
        return {"title": self.title, "row_labels": self.row_labels, "column_labels": self.column_labels,
                "cells": [{"row": r, "col": c, **cell.to_dict()} for (r, c), cell in sorted(self.cells.items())]}

    @classmethod
    def from_dict(cls, d: dict) -> "RunGrid":
        cells = {}
        for item in d["cells"]:
            item = dict(item)
            key = (item.pop("row"), item.pop("col"))
            cells[key] = CellResult(**item)
        return cls(d["title"], list(d["row_labels"]), list(d["column_labels"]), cells).validate()


def _cell_id(row: str, col: str) -> str:
    return f"{row.replace('%', 'pct')}__{col}"


def _run_column(col, col_label, grid: GridSpec, pretrain_config: PretrainConfig,
                finetune_config: FinetuneConfig, data: SliceTable, model_spec: ModelSpec,
                sweep_dir: Path) -> list[tuple[str, CellResult]]:
    batch, resolution = col
    cells_dir = sweep_dir / "cells"
    ckpt_path = sweep_dir / "checkpoints" / f"pretrained_{col_label}.npz"
    results = []
    pending = []
    for frac in grid.fractions:
        row = fraction_label(frac)
        path = cells_dir / f"{_cell_id(row, col_label)}.json"
        if path.exists():
            cell = CellResult(**json.loads(path.read_text()))
            if cell.status == "done":
                results.append((row, cell))
                continue
        pending.append((frac, row, path))
    if not pending:
        return results

    checkpoint = None
    needs_pretrain = finetune_config.init == "from_checkpoint"
    try:
        if needs_pretrain:
            if ckpt_path.exists():
                checkpoint = load_checkpoint(ckpt_path)
            else:
                cfg = copy.deepcopy(pretrain_config)
                cfg.batch_size, cfg.resolution = batch, resolution
                checkpoint = pretrain(cfg, data, model_spec,
                                      log_path=sweep_dir / "logs" / f"pretrain_{col_label}.csv")
                save_checkpoint(checkpoint, ckpt_path)
        pretrain_error = None
    except Exception as exc:  # the column's cells are marked failed, the grid goes on
        pretrain_error = f"pretrain failed: {type(exc).__name__}: {exc}"
        log.error("column %s: %s", col_label, pretrain_error)

    for frac, row, path in pending:
        cell_id = _cell_id(row, col_label)
        if pretrain_error is not None:
            cell = CellResult(cell_id, "failed", seed=finetune_config.seed, error=pretrain_error)
        else:
            cfg = copy.deepcopy(finetune_config)
            cfg.label_fraction = frac
            try:
                data_col = data if checkpoint is not None else data.at_resolution(resolution)
                ft_ckpt, acc = finetune(checkpoint, cfg, data_col, model_spec,
                                        log_path=sweep_dir / "logs" / f"finetune_{cell_id}.csv")
                ft_path = save_checkpoint(ft_ckpt, sweep_dir / "checkpoints" / f"finetuned_{cell_id}.npz")
                cell = CellResult(cell_id, "done", acc, str(ft_path.relative_to(sweep_dir)), cfg.seed)
            except Exception as exc:
                log.error("cell %s failed: %s", cell_id, exc)
                cell = CellResult(cell_id, "failed", seed=cfg.seed, error=f"{type(exc).__name__}: {exc}")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(cell.to_dict(), sort_keys=True) + "\n")
        results.append((row, cell))
    return results


def run_sweep(grid: GridSpec, pretrain_config: PretrainConfig, finetune_config: FinetuneConfig,
              data: SliceTable, model_spec: ModelSpec, sweep_dir: str | Path, jobs: int = 1) -> RunGrid:
    """Pre-train once per column, fine-tune once per fraction, persist every cell.

    Cells already recorded as done under ``sweep_dir/cells`` are skipped, so an
    interrupted sweep resumes where it stopped. Columns are independent and
    run in ``jobs`` worker processes when ``jobs > 1``.
    """
    sweep_dir = Path(sweep_dir)
    sweep_dir.mkdir(parents=True, exist_ok=True)
    pretrain_config.validate()
    finetune_config.validate()
    labels = grid.column_labels
    args = [(col, label, grid, pretrain_config, finetune_config, data, model_spec, sweep_dir)
            for col, label in zip(grid.columns, labels)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_run_column_star, args))
    else:
        outputs = [_run_column(*a) for a in args]

    title = pretrain_config.framework if finetune_config.init == "from_checkpoint" else "supervised"
    result = RunGrid(title, [fraction_label(f) for f in grid.fractions], labels)
    for label, column in zip(labels, outputs):
        for row, cell in column:
            result.cells[(row, label)] = cell
    (sweep_dir / "grid.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    return result.validate()


def _run_column_star(args):
    return _run_column(*args)
