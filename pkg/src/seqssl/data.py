"""Dataset curation: phantom volumes, central-slice extraction, resampling and
patient-level split manifests.

Volumes are indexed ``(D, H, W)``. The axial plane slices along axis 0, coronal
along axis 1 and sagittal along axis 2.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ValidationError, require

SEQUENCE_LABELS = ("T1", "T2", "FLAIR", "TOF", "TraceW", "DWI", "ADC", "GRE", "Perfusion")
LABEL_INDEX = {name: i for i, name in enumerate(SEQUENCE_LABELS)}
N_CLASSES = len(SEQUENCE_LABELS)

PLANES = ("sagittal", "coronal", "axial")
PLANE_AXIS = {"axial": 0, "coronal": 1, "sagittal": 2}
PLANE_ALIASES = {"sag": "sagittal", "cor": "coronal", "ax": "axial"}

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.7, 0.1, 0.2)


def parse_planes(planes: str | Iterable[str]) -> tuple[str, ...]:
    """Accept ``"sag,cor,ax"`` or an iterable of full/short plane names."""
    if isinstance(planes, str):
        planes = [p for p in planes.split(",") if p.strip()]
    out = []
    for p in planes:
        name = PLANE_ALIASES.get(p.strip(), p.strip())
        require(name in PLANE_AXIS, f"unknown plane {p!r}")
        if name not in out:
            out.append(name)
    require(len(out) > 0, "planes must be nonempty")
    return tuple(out)


@dataclass
class Volume:
    patient_id: str
    study_id: str
    sequence_label: str
    voxels: np.ndarray

    def __post_init__(self):
        require(self.sequence_label in LABEL_INDEX, f"unknown sequence label {self.sequence_label!r}")
        require(self.voxels.ndim == 3, f"voxels must be 3D, got shape {self.voxels.shape}")
        require(min(self.voxels.shape) >= 1, "empty volume")
        require(bool(np.isfinite(self.voxels).all()), "voxels must be finite")


@dataclass
class SliceRecord:
    patient_id: str
    study_id: str
    sequence_label: str
    plane: str
    slice_index: int
    pixels: np.ndarray

    @property
    def locator(self) -> str:
        return f"slices/{self.study_id}/{self.plane}_{self.slice_index:04d}.npy"


@dataclass
class PhantomSpec:
    n_studies_per_class: int = 10
    volume_shape: tuple[int, int, int] = (32, 32, 32)
    noise_level: float = 0.1
    seed: int = 0

    def validate(self) -> "PhantomSpec":
        require(int(self.n_studies_per_class) >= 1, "must be >= 1", "phantom.n_studies_per_class")
        shape = tuple(self.volume_shape)
        require(len(shape) == 3 and all(int(s) >= 4 for s in shape),
                f"must be three sizes >= 4, got {shape}", "phantom.volume_shape")
        require(math.isfinite(self.noise_level) and self.noise_level >= 0,
                "must be >= 0", "phantom.noise_level")
        return self


# --------------------------------------------------------------------------
# phantom generator


# Tissue intensities per class: background, scalp, grey matter, white matter, CSF.
# Each class also gets a texture term, see ``_class_texture``.
_TISSUE_CONTRAST = {
    "T1":        (0.0, 0.90, 0.50, 0.75, 0.12),
    "T2":        (0.0, 0.55, 0.60, 0.42, 1.00),
    "FLAIR":     (0.0, 0.25, 0.62, 0.45, 0.05),
    "TOF":       (0.0, 0.55, 0.20, 0.17, 0.08),
    "TraceW":    (0.0, 0.35, 0.40, 0.60, 0.30),
    "DWI":       (0.0, 0.05, 0.35, 0.65, 0.08),
    "ADC":       (0.0, 0.10, 0.50, 0.45, 0.95),
    "GRE":       (0.0, 0.40, 0.55, 0.50, 0.60),
    "Perfusion": (0.0, 0.20, 0.60, 0.40, 0.30),
}

# Smooth base-intensity profile: linear bias field gain per class along (z, y, x).
_BIAS_DIRECTION = {
    "T1": (0.0, 0.0, 0.0),
    "T2": (0.0, 0.0, 0.0),
    "FLAIR": (0.0, 0.10, 0.0),
    "TOF": (0.15, 0.0, 0.0),
    "TraceW": (0.0, 0.0, 0.10),
    "DWI": (0.0, 0.35, 0.0),
    "ADC": (0.0, 0.0, 0.0),
    "GRE": (-0.30, 0.0, 0.0),
    "Perfusion": (0.0, 0.0, -0.15),
}


@dataclass
class _Anatomy:
    head: np.ndarray
    brain: np.ndarray
    grey: np.ndarray
    csf: np.ndarray
    periventricular: np.ndarray
    coords: tuple[np.ndarray, np.ndarray, np.ndarray]


def _sample_anatomy(shape, rng: np.random.Generator) -> _Anatomy:
    z, y, x = np.meshgrid(*[np.linspace(-1.0, 1.0, n) for n in shape], indexing="ij")
    c = rng.uniform(-0.06, 0.06, size=3)
    r = rng.uniform(0.72, 0.92, size=3)
    zc, yc, xc = z - c[0], y - c[1], x - c[2]
    rho = np.sqrt((zc / r[0]) ** 2 + (yc / r[1]) ** 2 + (xc / r[2]) ** 2)
    head = rho <= 1.0
    brain = rho <= 0.84
    grey = brain & (rho > rng.uniform(0.62, 0.72))
    v = np.array([0.16, 0.30, 0.20]) * rng.uniform(0.75, 1.25, size=3)
    rv = np.sqrt((zc / v[0]) ** 2 + (yc / v[1]) ** 2 + (xc / v[2]) ** 2)
    csf = rv <= 1.0
    periventricular = (rv > 1.0) & (rv <= 1.45)
    return _Anatomy(head, brain, grey, csf, periventricular, (zc, yc, xc))


def _class_texture(label: str, anat: _Anatomy, rng: np.random.Generator) -> np.ndarray:
    shape = anat.head.shape
    zc, yc, xc = anat.coords
    tex = np.zeros(shape)
    if label == "FLAIR":
        tex += 0.40 * (anat.periventricular & anat.brain)
    elif label == "TOF":
        # bright vessels running along the z axis
        for _ in range(rng.integers(8, 14)):
            py, px = rng.uniform(-0.5, 0.5, size=2)
            width = rng.uniform(0.04, 0.08)
            tex += 0.75 * (((yc - py) ** 2 + (xc - px) ** 2) < width**2)
    elif label == "TraceW":
        tex += 0.25 * rng.standard_normal(shape) * anat.brain
    elif label == "DWI":
        pz, py, px = rng.uniform(-0.35, 0.35, size=3)
        tex += 0.30 * (((zc - pz) ** 2 + (yc - py) ** 2 + (xc - px) ** 2) < rng.uniform(0.15, 0.25) ** 2)
    elif label == "ADC":
        mottle = ndimage.gaussian_filter(rng.standard_normal(shape), 1.5)
        tex += 0.6 * mottle / (np.abs(mottle).max() + 1e-12) * anat.brain
    elif label == "GRE":
        spots = rng.random(shape) < 0.004
        spots = ndimage.binary_dilation(spots, iterations=1)
        tex -= 0.45 * (spots & anat.brain)
    return tex


def _blocky(vol: np.ndarray, factor: int) -> np.ndarray:
    out = vol.copy()
    for axis in range(3):
        n = vol.shape[axis]
        idx = (np.arange(n) // factor) * factor
        out = np.take(out, idx, axis=axis)
    return out


def _phantom_volume(label: str, anat: _Anatomy, noise_level: float, rng: np.random.Generator) -> np.ndarray:
    bg, scalp, grey, white, csf = _TISSUE_CONTRAST[label]
    vol = np.full(anat.head.shape, bg)
    vol[anat.head] = scalp
    vol[anat.brain] = white
    vol[anat.grey] = grey
    vol[anat.csf & anat.brain] = csf
    vol = vol + _class_texture(label, anat, rng)
    vol = ndimage.gaussian_filter(vol, 0.6)
    if label == "Perfusion":
        vol = _blocky(vol, 4)
    gz, gy, gx = _BIAS_DIRECTION[label]
    zc, yc, xc = anat.coords
    vol = vol * (1.0 + gz * zc + gy * yc + gx * xc) * anat.head
    vol = vol + noise_level * rng.standard_normal(vol.shape)
    gain = rng.uniform(200.0, 2000.0)
    offset = rng.uniform(0.0, 50.0)
    return gain * vol + offset


def generate_phantom_dataset(spec: PhantomSpec) -> list[Volume]:
    """Synthesize ``9 * n_studies_per_class`` phantom volumes.

    Every phantom patient contributes one study per sequence class and all
    nine share the patient's anatomy (head/brain ellipsoids, cortex shell,
    ventricles), so only contrast distinguishes the classes. Per class:

    * a tissue contrast table (e.g. bright CSF for T2/ADC, dark CSF for T1/FLAIR),
    * a linear bias field along a class-specific direction,
    * a texture term: periventricular hyperintense rim (FLAIR), bright
      z-directed vessel streaks (TOF), speckle (TraceW), a bright blob (DWI),
      smooth mottling (ADC), dark susceptibility spots (GRE), 4-voxel blockiness
      (Perfusion),

    followed by additive Gaussian noise at ``noise_level`` (relative to unit
    tissue contrast) and a random scanner gain/offset per study.
    """
    spec.validate()
    shape = tuple(int(s) for s in spec.volume_shape)
    root = np.random.SeedSequence(int(spec.seed))
    volumes = []
    for k, child in enumerate(root.spawn(int(spec.n_studies_per_class))):
        patient_rng, *class_seeds = child.spawn(1 + N_CLASSES)
        anat = _sample_anatomy(shape, np.random.default_rng(patient_rng))
        patient_id = f"P{k:04d}"
        for label, seq in zip(SEQUENCE_LABELS, class_seeds):
            vox = _phantom_volume(label, anat, float(spec.noise_level), np.random.default_rng(seq))
            volumes.append(Volume(patient_id, f"{patient_id}-{label}", label, vox.astype(np.float32)))
    return volumes


# --------------------------------------------------------------------------
# slice operations


def central_range(length: int, fraction: float) -> range:
    """Indices of the central ``fraction`` of an axis of ``length`` slices."""
    k = max(1, int(math.floor(fraction * length + 0.5)))
    k = min(k, length)
    start = (length - k) // 2
    return range(start, start + k)


def extract_central_slices(volume: Volume, fraction: float, planes: Iterable[str]) -> list[SliceRecord]:
    require(0.0 < fraction <= 1.0, f"fraction must lie in (0, 1], got {fraction}")
    planes = parse_planes(planes)
    vox = volume.voxels
    require(vox.size > 0, "empty volume")
    records = []
    for plane in planes:
        axis = PLANE_AXIS[plane]
        for i in central_range(vox.shape[axis], fraction):
            pixels = np.take(vox, i, axis=axis)
            records.append(SliceRecord(volume.patient_id, volume.study_id, volume.sequence_label,
                                       plane, int(i), np.ascontiguousarray(pixels)))
    return records


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resample_slice(pixels: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling.

    Output pixel ``i`` samples input coordinate ``i * (n_in - 1) / (n_out - 1)``,
    so the four corners map onto the input corners exactly. A single-pixel
    output axis samples the input centre.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    require(pixels.ndim == 2 and pixels.size > 0, "input must be a nonempty 2D array")
    h, w = (int(t) for t in target)
    require(h >= 1 and w >= 1, f"target dims must be >= 1, got {target}")
    require(bool(np.isfinite(pixels).all()), "input contains non-finite values")
    if pixels.shape == (h, w):
        return pixels.copy()

    def weights(n_in, n_out):
        c = _axis_coords(n_in, n_out)
        lo = np.clip(np.floor(c).astype(int), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        t = c - lo
        return lo, hi, t

    y0, y1, ty = weights(pixels.shape[0], h)
    x0, x1, tx = weights(pixels.shape[1], w)
    top = pixels[y0][:, x0] * (1 - tx) + pixels[y0][:, x1] * tx
    bot = pixels[y1][:, x0] * (1 - tx) + pixels[y1][:, x1] * tx
    out = top * (1 - ty)[:, None] + bot * ty[:, None]
    # convex combination of equal values must stay exact
    lo, hi = pixels.min(), pixels.max()
    return np.clip(out, lo, hi)


def normalize_intensity(pixels: np.ndarray) -> np.ndarray:
    """Per-slice min-max scaling to [0, 1]; constant slices become zeros."""
    pixels = np.asarray(pixels, dtype=np.float64)
    require(bool(np.isfinite(pixels).all()), "input contains non-finite values")
    lo, hi = pixels.min(), pixels.max()
    if hi <= lo:
        return np.zeros_like(pixels)
    return (pixels - lo) / (hi - lo)


def is_empty_slice(pixels: np.ndarray) -> bool:
    return float(np.var(pixels)) == 0.0


def prepare_slices(volumes: Iterable[Volume], fraction: float = 0.3,
                   planes: Iterable[str] = PLANES, size: int = 84) -> list[SliceRecord]:
    """Extract, resample and normalize central slices; drop empty ones."""
    out = []
    for vol in volumes:
        for rec in extract_central_slices(vol, fraction, planes):
            px = normalize_intensity(resample_slice(rec.pixels, (size, size)))
            if is_empty_slice(px):
                continue
            rec.pixels = px.astype(np.float32)
            out.append(rec)
    return out


# --------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    path: str
    patient_id: str
    study_id: str
    label: str
    plane: str
    slice_index: int
    split: str

    def to_dict(self) -> dict:
        return {"path": self.path, "patient_id": self.patient_id, "study_id": self.study_id,
                "label": self.label, "plane": self.plane, "slice_index": self.slice_index,
                "split": self.split}


@dataclass
class SplitManifest:
    entries: list[ManifestEntry]
    seed: int = 0
    ratios: tuple[float, float, float] = DEFAULT_RATIOS

    def patients(self, split: str) -> set[str]:
        return {e.patient_id for e in self.entries if e.split == split}

    def select(self, keep) -> "SplitManifest":
        return SplitManifest([e for e in self.entries if keep(e)], self.seed, self.ratios)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.entries)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl())
        path.with_suffix(".meta.json").write_text(
            json.dumps({"seed": self.seed, "ratios": list(self.ratios)}, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "SplitManifest":
        path = Path(path)
        entries = [ManifestEntry(**json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
        meta_path = path.with_suffix(".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(entries, int(meta.get("seed", 0)), tuple(meta.get("ratios", DEFAULT_RATIOS)))


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer allocation of ``n`` items by largest remainder; ties go to the earlier split."""
    targets = [r * n for r in ratios]
    counts = [int(math.floor(t + 1e-9)) for t in targets]
    left = n - sum(counts)
    # rounding keeps float noise (5.6 - 5 vs 1.6 - 1) from breaking exact ties
    order = sorted(range(len(ratios)), key=lambda i: (-round(targets[i] - counts[i], 9), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def _check_ratios(ratios: Sequence[float]) -> tuple[float, float, float]:
    require(len(ratios) == 3, "ratios must have three entries (train, val, test)")
    require(all(r >= 0 for r in ratios), "ratios must be nonnegative")
    require(abs(sum(ratios) - 1.0) <= 1e-9, f"ratios must sum to 1, got {sum(ratios)}")
    return tuple(float(r) for r in ratios)


def split_by_patient(records: Sequence[SliceRecord], ratios: Sequence[float] = DEFAULT_RATIOS,
                     seed: int = 0) -> SplitManifest:
    ratios = _check_ratios(ratios)
    require(len(records) > 0, "records must be nonempty")
    patients = sorted({r.patient_id for r in records})
    n_nonzero = sum(r > 0 for r in ratios)
    if len(patients) < n_nonzero:
        raise ValidationError(f"{len(patients)} patients cannot fill {n_nonzero} nonempty splits")
    order = np.random.default_rng(seed).permutation(len(patients))
    counts = largest_remainder(len(patients), ratios)
    tag = {}
    pos = 0
    for split, count in zip(SPLITS, counts):
        for i in order[pos:pos + count]:
            tag[patients[i]] = split
        pos += count
    entries = [ManifestEntry(r.locator, r.patient_id, r.study_id, r.sequence_label, r.plane,
                             r.slice_index, tag[r.patient_id]) for r in records]
    return SplitManifest(entries, seed, ratios)


# --------------------------------------------------------------------------
# in-memory slice table


@dataclass
class SliceTable:
    """Manifest entries paired row-for-row with their pixel arrays ``(n, H, W)``."""

    manifest: SplitManifest
    pixels: np.ndarray

    def __post_init__(self):
        require(len(self.manifest.entries) == len(self.pixels), "manifest and pixels disagree in length")

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def entries(self) -> list[ManifestEntry]:
        return self.manifest.entries

    @property
    def labels(self) -> np.ndarray:
        return np.array([LABEL_INDEX[e.label] for e in self.entries], dtype=np.int64)

    @property
    def study_ids(self) -> list[str]:
        return [e.study_id for e in self.entries]

    @property
    def resolution(self) -> int:
        return int(self.pixels.shape[-1])

    def take(self, idx) -> "SliceTable":
        idx = np.asarray(idx, dtype=np.int64)
        m = SplitManifest([self.entries[i] for i in idx], self.manifest.seed, self.manifest.ratios)
        return SliceTable(m, self.pixels[idx])

    def split(self, tag: str) -> "SliceTable":
        require(tag in SPLITS, f"unknown split {tag!r}")
        return self.take([i for i, e in enumerate(self.entries) if e.split == tag])

    def restrict(self, manifest: SplitManifest) -> "SliceTable":
        """Rows whose locator appears in ``manifest`` (which may retag them)."""
        index = {e.path: i for i, e in enumerate(self.entries)}
        idx = [index[e.path] for e in manifest.entries]
        return SliceTable(manifest, self.pixels[np.asarray(idx, dtype=np.int64)])

    def unlabeled(self) -> "UnlabeledSlices":
        return UnlabeledSlices([e.path for e in self.entries], self.pixels)

    def at_resolution(self, size: int) -> "SliceTable":
        if size == self.resolution:
            return self
        px = np.stack([normalize_intensity(resample_slice(p, (size, size))) for p in self.pixels])
        return SliceTable(self.manifest, px.astype(np.float32))


@dataclass
class UnlabeledSlices:
    """Pixels and locators only; what pre-training is allowed to see."""

    locators: list[str]
    pixels: np.ndarray

    def __len__(self) -> int:
        return len(self.pixels)


def build_slice_table(volumes: Iterable[Volume], fraction: float = 0.3, planes: Iterable[str] = PLANES,
                      size: int = 84, ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0) -> SliceTable:
    records = prepare_slices(volumes, fraction, planes, size)
    manifest = split_by_patient(records, ratios, seed)
    return SliceTable(manifest, np.stack([r.pixels for r in records]).astype(np.float32))


# --------------------------------------------------------------------------
# on-disk formats


def write_volume(volume: Volume, directory: str | Path) -> Path:
    """Write ``<study_id>.json`` header plus ``<study_id>.raw`` little-endian float32 payload."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {"patient_id": volume.patient_id, "study_id": volume.study_id,
              "sequence_label": volume.sequence_label, "shape": list(volume.voxels.shape)}
    head_path = directory / f"{volume.study_id}.json"
    head_path.write_text(json.dumps(header, sort_keys=True) + "\n")
    volume.voxels.astype("<f4").tofile(directory / f"{volume.study_id}.raw")
    return head_path


def read_volume(header_path: str | Path) -> Volume:
    header_path = Path(header_path)
    header = json.loads(header_path.read_text())
    for key in ("patient_id", "study_id", "sequence_label", "shape"):
        require(key in header, f"{header_path.name}: missing header field {key!r}")
    shape = tuple(int(s) for s in header["shape"])
    payload = np.fromfile(header_path.with_suffix(".raw"), dtype="<f4")
    require(payload.size == int(np.prod(shape)),
            f"{header_path.name}: payload has {payload.size} values, header shape {shape}")
    return Volume(header["patient_id"], header["study_id"], header["sequence_label"],
                  payload.reshape(shape).astype(np.float32))


def iter_volumes(directory: str | Path):
    for path in sorted(Path(directory).glob("*.json")):
        yield read_volume(path)


def ingest(in_dir: str | Path, out_dir: str | Path, fraction: float = 0.3, planes=PLANES,
           size: int = 84, ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0) -> SliceTable:
    """Curate a volume container directory into slice files plus ``manifest.jsonl``."""
    volumes = list(iter_volumes(in_dir))
    require(len(volumes) > 0, f"no volumes found in {in_dir}")
    table = build_slice_table(volumes, fraction, planes, size, ratios, seed)
    write_slice_table(table, out_dir)
    return table


def write_slice_table(table: SliceTable, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    for entry, px in zip(table.entries, table.pixels):
        path = out_dir / entry.path
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, px.astype("<f4"))
    return table.manifest.write(out_dir / "manifest.jsonl")


def load_slice_table(manifest_path: str | Path) -> SliceTable:
    manifest_path = Path(manifest_path)
    manifest = SplitManifest.read(manifest_path)
    require(len(manifest.entries) > 0, f"{manifest_path} is empty")
    root = manifest_path.parent
    pixels = np.stack([np.load(root / e.path) for e in manifest.entries]).astype(np.float32)
    return SliceTable(manifest, pixels)
