"""Data pipeline: manifests, preprocessing, splits, and a synthetic generator.

On disk a dataset is a directory with a UTF-8 CSV manifest (header
``image,mask,label``, paths relative to the manifest) pointing at grayscale
images and binary mask PNGs.  A mask pixel >= 128 counts as tumor.  Labels:
0 benign, 1 malignant.

Preprocessing: pad to square (extra pixel of an odd difference goes to the
bottom/right), resize (bilinear images, nearest-neighbor masks), scale
intensities by 1/255, replicate grayscale to three channels for the network.

The synthetic generator exists so the whole train/eval path can be exercised
without clinical data: speckled background plus one elliptical lesion per
image, smooth and dark for benign, irregular boundary with weaker contrast
for malignant.  Same seed, same bytes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

__all__ = [
    "Sample",
    "ManifestRecord",
    "DatasetManifest",
    "SplitSpec",
    "load_manifest",
    "load_sample",
    "pad_to_square",
    "resize_to",
    "normalize",
    "to_network_input",
    "load_arrays",
    "split",
    "synth_generate",
]

MASK_THRESHOLD = 128  # pixel values at or above this count as tumor


@dataclass
class Sample:
    """One grayscale image, its binary mask, and the class label."""

    image: np.ndarray  # (H, W) uint8
    mask: np.ndarray   # (H, W) uint8, values in {0, 1}
    label: int         # 0 benign, 1 malignant

    def __post_init__(self):
        if self.image.ndim != 2 or self.mask.ndim != 2:
            raise ValueError(
                f"sample arrays must be 2-D, got image {self.image.shape} mask {self.mask.shape}"
            )
        if self.image.shape != self.mask.shape:
            raise ValueError(
                f"image shape {self.image.shape} != mask shape {self.mask.shape}"
            )
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask must be binary 0/1")


@dataclass(frozen=True)
class ManifestRecord:
    image_path: Path
    mask_path: Path
    label: int


@dataclass
class DatasetManifest:
    records: list
    root: Path
    provenance: str = "clinical"

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest([self.records[int(i)] for i in indices], self.root, self.provenance)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def save(self, path):
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image", "mask", "label"])
            base = path.parent
            for r in self.records:
                writer.writerow([_relativize(r.image_path, base), _relativize(r.mask_path, base), r.label])


def _relativize(p: Path, base: Path) -> str:
    try:
        return Path(p).relative_to(base).as_posix()
    except ValueError:
        return Path(p).as_posix()


def load_manifest(path) -> DatasetManifest:
    """Read a manifest CSV, checking every referenced file up front.

    A bad row (missing file, unparseable image, non-binary label, image/mask
    size disagreement) raises with the offending path in the message.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["image", "mask", "label"]:
            raise ValueError(f"{path}: expected header 'image,mask,label', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            img_p = root / row[0]
            mask_p = root / row[1]
            if row[2] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: label must be 0 or 1, got {row[2]!r}")
            for p in (img_p, mask_p):
                if not p.is_file():
                    raise FileNotFoundError(f"{path}:{lineno}: referenced file missing: {p}")
            try:
                with Image.open(img_p) as im, Image.open(mask_p) as mk:
                    if im.size != mk.size:
                        raise ValueError(
                            f"{path}:{lineno}: image size {im.size} != mask size {mk.size} ({img_p})"
                        )
            except (OSError, SyntaxError) as exc:
                raise ValueError(f"{path}:{lineno}: cannot parse image pair ({img_p}): {exc}") from exc
            records.append(ManifestRecord(img_p, mask_p, int(row[2])))
    if not records:
        raise ValueError(f"{path}: manifest has no records")
    return DatasetManifest(records, root)


def load_sample(record: ManifestRecord) -> Sample:
    with Image.open(record.image_path) as im:
        image = np.asarray(im.convert("L"), dtype=np.uint8)
    with Image.open(record.mask_path) as mk:
        mask_raw = np.asarray(mk.convert("L"))
    mask = (mask_raw >= MASK_THRESHOLD).astype(np.uint8)
    return Sample(image, mask, record.label)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def pad_to_square(sample: Sample) -> Sample:
    """Zero-pad the shorter axis; an odd difference puts the extra pixel
    on the bottom/right."""
    h, w = sample.image.shape
    if h == w:
        return sample
    side = max(h, w)
    dh, dw = side - h, side - w
    pad = ((dh // 2, dh - dh // 2), (dw // 2, dw - dw // 2))
    return Sample(
        np.pad(sample.image, pad),
        np.pad(sample.mask, pad),
        sample.label,
    )


def resize_to(sample: Sample, size: int = 224) -> Sample:
    """Resize a square sample: bilinear for the image, nearest for the mask."""
    h, w = sample.image.shape
    if h != w:
        raise ValueError(f"resize_to expects a square sample, got {h}x{w}; pad_to_square first")
    if size < 1:
        raise ValueError(f"target size must be positive, got {size}")
    if h == size:
        return sample
    img = Image.fromarray(sample.image, mode="L").resize((size, size), Image.BILINEAR)
    msk = Image.fromarray(sample.mask * np.uint8(255), mode="L").resize((size, size), Image.NEAREST)
    return Sample(
        np.asarray(img, dtype=np.uint8),
        (np.asarray(msk) >= MASK_THRESHOLD).astype(np.uint8),
        sample.label,
    )


def normalize(image: np.ndarray) -> np.ndarray:
    """uint8 intensities to float32 in [0, 1]."""
    return np.asarray(image, dtype=np.float32) / np.float32(255.0)


def to_network_input(sample: Sample, size: int = 224):
    """Pad, resize, normalize; returns ``(x, mask, label)`` where x is
    (3, size, size) float32 (grayscale replicated) and mask is
    (1, size, size) float32 in {0, 1}."""
    s = resize_to(pad_to_square(sample), size)
    x = np.broadcast_to(normalize(s.image), (3, size, size)).copy()
    m = s.mask.astype(np.float32)[None, :, :]
    return x, m, s.label


def load_arrays(manifest: DatasetManifest, size: int = 224):
    """Materialize a manifest: returns (X, M, y) stacked over samples."""
    if len(manifest) == 0:
        raise ValueError("cannot load an empty manifest")
    xs, ms, ys = [], [], []
    for rec in manifest.records:
        x, m, label = to_network_input(load_sample(rec), size)
        xs.append(x)
        ms.append(m)
        ys.append(label)
    return np.stack(xs), np.stack(ms), np.array(ys, dtype=np.float64)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """Either K-fold rotation or a single shuffled percentage holdout."""

    mode: str                  # "kfold" | "holdout"
    seed: int = 42
    k: int = 4
    fractions: tuple = (70, 15, 15)

    @classmethod
    def kfold(cls, k: int = 4, seed: int = 42) -> "SplitSpec":
        if k < 2:
            raise ValueError(f"k-fold needs k >= 2, got {k}")
        return cls("kfold", seed=seed, k=k)

    @classmethod
    def holdout(cls, train: float = 70, val: float = 15, test: float = 15,
                seed: int = 42) -> "SplitSpec":
        fr = (float(train), float(val), float(test))
        if any(f <= 0 for f in fr) or abs(sum(fr) - 100.0) > 1e-9:
            raise ValueError(f"holdout fractions must be positive and sum to 100, got {fr}")
        return cls("holdout", seed=seed, fractions=fr)


def split(manifest, spec: SplitSpec):
    """Fold assignments as index arrays: a list of dicts with keys
    train/val/test.

    kfold(K): one shuffled partition into K folds; assignment i trains on
    the other K-1 folds and splits fold i in half, first half validation,
    second half test.  Test halves across assignments are disjoint.
    holdout: one assignment cut train/val/test from a seeded shuffle.
    """
    n = len(manifest)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(n)
    if spec.mode == "kfold":
        if spec.k > n:
            raise ValueError(f"cannot make {spec.k} folds from {n} samples")
        folds = np.array_split(perm, spec.k)
        assignments = []
        for i in range(spec.k):
            held = folds[i]
            train = np.concatenate([folds[j] for j in range(spec.k) if j != i])
            half = len(held) // 2
            assignments.append({
                "train": np.sort(train),
                "val": np.sort(held[:half]),
                "test": np.sort(held[half:]),
            })
        return assignments
    if spec.mode == "holdout":
        f_train, f_val, _ = spec.fractions
        n_train = int(math.floor(n * f_train / 100.0))
        n_val = int(math.floor(n * f_val / 100.0))
        if n_train == 0 or n_val == 0 or n_train + n_val >= n:
            raise ValueError(f"holdout split of {n} samples leaves an empty part")
        return [{
            "train": np.sort(perm[:n_train]),
            "val": np.sort(perm[n_train:n_train + n_val]),
            "test": np.sort(perm[n_train + n_val:]),
        }]
    raise ValueError(f"unknown split mode {spec.mode!r}")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _lesion_mask(size, cx, cy, a, b, phi, wobble_amp, wobble, rng):
    """Filled ellipse, optionally with an irregular (wobbled) boundary."""
    yy, xx = np.mgrid[0:size, 0:size]
    dx = xx - cx
    dy = yy - cy
    xr = dx * math.cos(phi) + dy * math.sin(phi)
    yr = -dx * math.sin(phi) + dy * math.cos(phi)
    r = np.sqrt((xr / a) ** 2 + (yr / b) ** 2)
    if wobble_amp <= 0.0:
        return r <= 1.0
    theta = np.arctan2(yr / b, xr / a)
    edge = np.ones_like(r)
    for k, c, psi in wobble:
        edge += wobble_amp * c * np.sin(k * theta + psi)
    return r <= edge


def synth_generate(n: int, seed: int, out_dir, image_size: int = 224,
                   malignant_fraction: float = 0.4) -> DatasetManifest:
    """Write n synthetic image/mask pairs plus a manifest; deterministic in seed.

    Benign lesions are smooth ellipses much darker than the speckled
    background; malignant ones have wobbled, spiky boundaries and weaker
    contrast.  Every mask is nonempty and the lesion stays inside the frame.
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if image_size < 32:
        raise ValueError(f"image_size must be at least 32, got {image_size}")
    if not 0.0 <= malignant_fraction <= 1.0:
        raise ValueError(f"malignant_fraction must lie in [0, 1], got {malignant_fraction}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    n_mal = int(round(n * malignant_fraction))
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_mal] = 1
    rng.shuffle(labels)

    s = image_size
    records = []
    for i in range(n):
        label = int(labels[i])
        # multiplicative speckle over a slowly varying gain field
        gain = gaussian_filter(rng.normal(0.0, 1.0, (s, s)), sigma=s / 4.0)
        gain = 1.0 + 0.10 * gain / max(np.abs(gain).max(), 1e-9)
        speckle = rng.gamma(shape=10.0, scale=1.0 / 10.0, size=(s, s))
        img = 165.0 * gain * speckle

        a = rng.uniform(0.14, 0.24) * s
        b = rng.uniform(0.14, 0.24) * s
        margin = 1.3 * max(a, b)
        cx = rng.uniform(margin, s - margin)
        cy = rng.uniform(margin, s - margin)
        phi = rng.uniform(0.0, math.pi)
        if label == 1:
            wobble = [(int(k), rng.uniform(0.5, 1.0), rng.uniform(0.0, 2 * math.pi))
                      for k in rng.integers(5, 10, size=3)]
            mask = _lesion_mask(s, cx, cy, a, b, phi, 0.15, wobble, rng)
            contrast = rng.uniform(0.55, 0.75)
        else:
            mask = _lesion_mask(s, cx, cy, a, b, phi, 0.0, (), rng)
            contrast = rng.uniform(0.15, 0.30)
        img = np.where(mask, img * contrast, img)
        img = gaussian_filter(img, sigma=1.0)
        img = np.clip(img, 0.0, 255.0).astype(np.uint8)

        img_rel = f"images/sample_{i:04d}.png"
        mask_rel = f"masks/sample_{i:04d}.png"
        Image.fromarray(img, mode="L").save(out_dir / img_rel)
        Image.fromarray(mask.astype(np.uint8) * np.uint8(255), mode="L").save(out_dir / mask_rel)
        records.append(ManifestRecord(out_dir / img_rel, out_dir / mask_rel, label))

    manifest = DatasetManifest(records, out_dir, provenance="synthetic")
    manifest.save(out_dir / "manifest.csv")
    return manifest
