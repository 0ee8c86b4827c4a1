"""The phantom trend experiment: pre-train, fine-tune across label fractions, compare with scratch."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import PLANES, PhantomSpec, SliceTable, build_slice_table, generate_phantom_dataset
from .model_core import ModelSpec, build_model, load_model
from .report import EmbeddingSet, silhouette_by_label
from .trainer import (REFERENCE_FRACTIONS, FinetuneConfig, OptimizerConfig, PretrainConfig, embed, finetune, pretrain,
                      subsample_labels)

log = logging.getLogger(__name__)


@dataclass
class PhantomExperiment:
    """Desk-scale settings. 64^3 volumes, 15% central slices and three planes
    give 10 slices per plane and 2,700 slices in total, resampled to 32 px."""

    n_studies_per_class: int = 10
    volume_shape: tuple[int, int, int] = (64, 64, 64)
    noise_level: float = 0.1
    slice_fraction: float = 0.15
    resolution: int = 32
    backbone: str = "resnet_tiny"
    framework: str = "simsiam"
    pretrain_epochs: int = 50
    pretrain_batch: int = 64
    pretrain_lr: float = 0.05
    pretrain_weight_decay: float = 5e-4
    fractions: tuple[float, ...] = REFERENCE_FRACTIONS
    scratch_max_fraction: float = 0.05
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def table(self, seed: int) -> SliceTable:
        spec = PhantomSpec(self.n_studies_per_class, self.volume_shape, self.noise_level, seed)
        return build_slice_table(generate_phantom_dataset(spec), self.slice_fraction, PLANES, self.resolution,
                                 seed=seed)

    def pretrain_config(self, seed: int) -> PretrainConfig:
        opt = OptimizerConfig(lr=self.pretrain_lr, weight_decay=self.pretrain_weight_decay)
        return PretrainConfig(self.framework, self.pretrain_epochs, self.pretrain_batch, self.resolution, opt,
                              seed=seed)


@dataclass
class SeedResult:
    seed: int
    n_slices: int
    silhouette_init: float
    silhouette_pretrained: float
    from_checkpoint: dict[str, float]
    from_scratch: dict[str, float]
    seconds: float


def _finetune_fractions(ckpt, init: str, fractions, table: SliceTable, spec: ModelSpec, base: FinetuneConfig,
                        seed: int) -> dict[str, float]:
    """Fine-tune once per distinct labeled subset.

    Small fractions often round to the same one-study-per-class subset; since
    fine-tuning is deterministic, identical subsets share one run.
    """
    out: dict[str, float] = {}
    done: dict[str, float] = {}
    for f in fractions:
        key = subsample_labels(table.manifest, f, seed).to_jsonl()
        if key not in done:
            cfg = FinetuneConfig(f, init, base.epochs, base.batch_size, base.patience, base.optimizer, seed)
            done[key] = finetune(ckpt, cfg, table, spec)[1]
        out[repr(f)] = done[key]
    return out


def run_seed(settings: PhantomExperiment, seed: int) -> SeedResult:
    t0 = time.perf_counter()
    table = settings.table(seed)
    spec = ModelSpec(settings.backbone)
    test = table.split("test")

    def silhouette(model) -> float:
        return silhouette_by_label(EmbeddingSet(embed(model, test.pixels), test.labels))

    # pre-training starts from exactly this initialization
    sil0 = silhouette(build_model(spec, seed))
    ckpt = pretrain(settings.pretrain_config(seed), table, spec)
    sil1 = silhouette(load_model(ckpt, spec))
    low = [f for f in settings.fractions if f <= settings.scratch_max_fraction]
    tuned = _finetune_fractions(ckpt, "from_checkpoint", settings.fractions, table, spec, settings.finetune, seed)
    scratch = _finetune_fractions(None, "from_scratch", low, table, spec, settings.finetune, seed)
    result = SeedResult(seed, len(table), sil0, sil1, tuned, scratch, time.perf_counter() - t0)
    log.info("seed %d: %s", seed, result)
    return result


def run_experiment(settings: PhantomExperiment, seeds=(0, 1, 2), out: str | Path | None = None) -> list[SeedResult]:
    results = [run_seed(settings, s) for s in seeds]
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        payload = {"settings": asdict(settings), "seeds": [asdict(r) for r in results]}
        out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return results


def summarize(results: list[SeedResult]) -> dict:
    fractions = list(results[0].from_checkpoint)
    mean = {f: float(np.mean([r.from_checkpoint[f] for r in results])) for f in fractions}
    low = list(results[0].from_scratch)
    wins = [float(np.mean([r.from_checkpoint[f] for f in low])) > float(np.mean([r.from_scratch[f] for f in low]))
            for r in results]
    return {"mean_by_fraction": mean, "checkpoint_wins": wins,
            "silhouette_improved": [r.silhouette_pretrained > r.silhouette_init for r in results]}
