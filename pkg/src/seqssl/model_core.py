"""ResNet backbones, projection/predictor/classifier heads and checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .data import N_CLASSES
from .errors import ValidationError, require

MIN_INPUT_SIZE = 32
BACKBONES = ("resnet18", "resnet_tiny")
EMBED_DIMS = {"resnet18": 512, "resnet_tiny": 128}
STAGES = ("pretrained", "finetuned")


@dataclass
class ModelSpec:
    backbone_kind: str = "resnet18"
    in_channels: int = 1
    embed_dim: int | None = None
    proj_dim: int = 128
    pred_hidden_dim: int | None = None
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if self.embed_dim is None and self.backbone_kind in EMBED_DIMS:
            self.embed_dim = EMBED_DIMS[self.backbone_kind]
        if self.pred_hidden_dim is None:
            self.pred_hidden_dim = math.ceil(self.proj_dim / 4)

    def validate(self) -> "ModelSpec":
        require(self.backbone_kind in BACKBONES,
                f"unknown backbone {self.backbone_kind!r}, expected one of {BACKBONES}", "model.backbone_kind")
        require(self.in_channels == 1, "only single-channel input is supported", "model.in_channels")
        require(self.embed_dim == EMBED_DIMS[self.backbone_kind],
                f"{self.backbone_kind} embeds to {EMBED_DIMS[self.backbone_kind]}", "model.embed_dim")
        require(self.proj_dim >= 1, "must be >= 1", "model.proj_dim")
        require(self.pred_hidden_dim >= 1, "must be >= 1", "model.pred_hidden_dim")
        require(self.n_classes == N_CLASSES, f"must be {N_CLASSES}", "model.n_classes")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet(nn.Module):
    """Four residual stages followed by global average pooling."""

    def __init__(self, widths, blocks, stem: str, in_channels: int = 1):
        super().__init__()
        if stem == "imagenet":
            self.stem = nn.Sequential(
                nn.Conv2d(in_channels, widths[0], 7, 2, 3, bias=False), nn.BatchNorm2d(widths[0]),
                nn.ReLU(inplace=True), nn.MaxPool2d(3, 2, 1))
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(in_channels, widths[0], 3, 1, 1, bias=False), nn.BatchNorm2d(widths[0]),
                nn.ReLU(inplace=True), nn.MaxPool2d(2))
        layers = []
        cin = widths[0]
        for i, (w, n) in enumerate(zip(widths, blocks)):
            stage = [BasicBlock(cin, w, 1 if i == 0 else 2)] + [BasicBlock(w, w) for _ in range(n - 1)]
            layers.append(nn.Sequential(*stage))
            cin = w
        self.layers = nn.Sequential(*layers)
        self.out_dim = widths[-1]

    def forward(self, x):
        x = self.layers(self.stem(x))
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


def make_backbone(kind: str, in_channels: int = 1) -> ResNet:
    if kind == "resnet18":
        return ResNet((64, 128, 256, 512), (2, 2, 2, 2), "imagenet", in_channels)
    if kind == "resnet_tiny":
        return ResNet((16, 32, 64, 128), (1, 1, 1, 1), "small", in_channels)
    raise ValidationError(f"unknown backbone {kind!r}", "model.backbone_kind")


class SeqSSLModel(nn.Module):
    """Backbone plus projection, predictor and 9-way classifier heads."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        d, p, h = spec.embed_dim, spec.proj_dim, spec.pred_hidden_dim
        self.backbone = make_backbone(spec.backbone_kind, spec.in_channels)
        self.projector = nn.Sequential(
            nn.Linear(d, d, bias=False), nn.BatchNorm1d(d), nn.ReLU(inplace=True),
            nn.Linear(d, p, bias=False), nn.BatchNorm1d(p, affine=False))
        self.predictor = nn.Sequential(
            nn.Linear(p, h, bias=False), nn.BatchNorm1d(h), nn.ReLU(inplace=True), nn.Linear(h, p))
        self.classifier = nn.Linear(d, spec.n_classes)

    def forward_embed(self, batch: torch.Tensor) -> torch.Tensor:
        if batch.ndim != 4 or batch.shape[1] != self.spec.in_channels:
            raise ValidationError(f"expected (B, {self.spec.in_channels}, H, W), got {tuple(batch.shape)}")
        if min(batch.shape[-2:]) < MIN_INPUT_SIZE:
            raise ValidationError(f"input {tuple(batch.shape[-2:])} is below the {MIN_INPUT_SIZE}px minimum")
        return self.backbone(batch)

    def _check(self, x: torch.Tensor, width: int, what: str):
        if x.ndim != 2 or x.shape[1] != width:
            raise ValidationError(f"{what} expects (B, {width}), got {tuple(x.shape)}")

    def forward_project(self, embeddings: torch.Tensor) -> torch.Tensor:
        self._check(embeddings, self.spec.embed_dim, "projector")
        return self.projector(embeddings)

    def forward_predict(self, projections: torch.Tensor) -> torch.Tensor:
        self._check(projections, self.spec.proj_dim, "predictor")
        return self.predictor(projections)

    def forward_classify(self, embeddings: torch.Tensor) -> torch.Tensor:
        self._check(embeddings, self.spec.embed_dim, "classifier")
        return self.classifier(embeddings)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        return self.forward_classify(self.forward_embed(batch))


def build_model(spec: ModelSpec, init_seed: int = 0) -> SeqSSLModel:
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(init_seed))
        return SeqSSLModel(spec)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @property
    def stage(self) -> str:
        return self.metadata["training_stage"]

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(**self.metadata["model_spec"])

    def validate(self) -> "Checkpoint":
        require(self.metadata.get("training_stage") in STAGES,
                f"training_stage must be one of {STAGES}")
        for name, arr in self.arrays.items():
            require(arr.dtype == np.float32, f"{name}: dtype {arr.dtype} is not float32")
            require(bool(np.isfinite(arr).all()), f"{name}: non-finite values")
        has_classifier = any(k.startswith("classifier.") for k in self.arrays)
        require(has_classifier == (self.stage == "finetuned"),
                f"stage {self.stage!r} inconsistent with classifier head presence")
        return self


def checkpoint_from_model(model: SeqSSLModel, stage: str, epochs: int, seed: int, **extra) -> Checkpoint:
    require(stage in STAGES, f"unknown stage {stage!r}")
    state = model.state_dict()
    arrays = {}
    for name, t in state.items():
        if stage == "pretrained" and name.startswith("classifier."):
            continue
        arrays[name] = t.detach().cpu().numpy().astype(np.float32, copy=True)
    meta = {"model_spec": model.spec.to_dict(), "training_stage": stage, "epochs": int(epochs),
            "seed": int(seed), "framework_version": f"torch-{torch.__version__}"}
    meta.update(extra)
    return Checkpoint(arrays, meta).validate()


def load_model(checkpoint: Checkpoint, spec: ModelSpec | None = None, init_seed: int = 0) -> SeqSSLModel:
    """Instantiate a model and copy the checkpoint arrays into it.

    Arrays absent from the checkpoint (the classifier of a pre-trained
    checkpoint) keep their ``init_seed`` initialization.
    """
    ck_spec = checkpoint.model_spec
    if spec is not None and spec.to_dict() != ck_spec.to_dict():
        raise ValidationError(f"checkpoint spec {ck_spec.to_dict()} does not match {spec.to_dict()}")
    model = build_model(ck_spec, init_seed)
    state = model.state_dict()
    for name, arr in checkpoint.arrays.items():
        require(name in state, f"unexpected checkpoint array {name!r}")
        target = state[name]
        require(tuple(target.shape) == arr.shape, f"{name}: shape {arr.shape} != {tuple(target.shape)}")
        state[name] = torch.from_numpy(arr.copy()).to(target.dtype)
    model.load_state_dict(state)
    return model


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    """Write ``<path>.npz`` (little-endian float32 arrays) and ``<path>.json`` metadata."""
    path = Path(path).with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    # np.ascontiguousarray would promote 0-d arrays (BN counters) to 1-d
    arrays = {name: np.array(arr, dtype="<f4", order="C") for name, arr in checkpoint.arrays.items()}
    np.savez(path.with_suffix(".npz"), **arrays)
    path.with_suffix(".json").write_text(json.dumps(checkpoint.metadata, sort_keys=True, indent=2) + "\n")
    return path.with_suffix(".npz")


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path).with_suffix("")
    metadata = json.loads(path.with_suffix(".json").read_text())
    with np.load(path.with_suffix(".npz")) as npz:
        arrays = {name: npz[name].astype(np.float32) for name in npz.files}
    return Checkpoint(arrays, metadata).validate()
