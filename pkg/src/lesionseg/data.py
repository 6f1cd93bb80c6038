"""Sample loading, cropping, normalization, splits, a synthetic lesion
generator for desk-scale verification, and lesion-size statistics.

On-disk layout: ``root/images/<subject>_<slice>.png`` (16-bit grayscale)
and ``root/masks/<subject>_<slice>.png`` (8-bit, values 0/255).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .tensor import ShapeError, Tensor


class DatasetError(ValueError):
    """Raised on malformed on-disk datasets."""


@dataclass
class SamplePair:
    """One image slice with its binary lesion mask."""

    image: Tensor          # (1, 1, h, w) float32 intensities
    mask: np.ndarray       # (h, w) uint8 in {0, 1}
    subject_id: str
    slice_index: int

    def __post_init__(self):
        if self.image.shape[2:] != self.mask.shape:
            raise ShapeError(
                f"image spatial dims {self.image.shape[2:]} != mask dims "
                f"{self.mask.shape}"
            )
        values = np.unique(self.mask)
        if not np.isin(values, (0, 1)).all():
            raise ValueError(f"mask is not binary: values {values}")


@dataclass
class SplitManifest:
    """Subject-level train/val/test partition."""

    seed: int
    train: list
    val: list
    test: list

    def split_of(self, subject_id):
        for name in ("train", "val", "test"):
            if subject_id in getattr(self, name):
                return name
        return None

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# seed={self.seed}\n")
            for name in ("train", "val", "test"):
                for sid in getattr(self, name):
                    fh.write(f"{sid}\t{name}\n")

    @classmethod
    def load(cls, path):
        seed = 0
        parts = {"train": [], "val": [], "test": []}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line.startswith("# seed="):
                    seed = int(line.split("=", 1)[1])
                    continue
                if not line:
                    continue
                sid, name = line.split("\t")
                parts[name].append(sid)
        return cls(seed=seed, **parts)


# ---------------------------------------------------------------------------
# Geometry and intensity transforms


def crop_center(sample: SamplePair, target=(224, 176)) -> SamplePair:
    """Centered crop to (th, tw); image and mask cropped identically."""
    th, tw = target
    h, w = sample.mask.shape
    if th > h or tw > w:
        raise ShapeError(f"crop target {target} larger than source {(h, w)}")
    oy = (h - th) // 2
    ox = (w - tw) // 2
    image = Tensor(sample.image.data[:, :, oy:oy + th, ox:ox + tw].copy())
    mask = sample.mask[oy:oy + th, ox:ox + tw].copy()
    return SamplePair(image=image, mask=mask,
                      subject_id=sample.subject_id,
                      slice_index=sample.slice_index)


def normalize_intensity(image: Tensor) -> Tensor:
    """Per-slice min-max scaling to [0, 1]; a constant slice maps to zeros."""
    out = np.empty_like(image.data)
    for i in range(image.shape[0]):
        sl = image.data[i]
        lo, hi = sl.min(), sl.max()
        out[i] = 0.0 if hi == lo else (sl - lo) / (hi - lo)
    return Tensor(out)


def make_split(subject_ids, counts, seed) -> SplitManifest:
    """Seeded shuffle of the (sorted, deduplicated) ids, then partition."""
    ids = sorted(set(subject_ids))
    n_train, n_val, n_test = counts
    if n_train + n_val + n_test > len(ids):
        raise ValueError(
            f"split counts {counts} exceed available {len(ids)} subjects"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return SplitManifest(
        seed=seed,
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:n_train + n_val + n_test],
    )


# ---------------------------------------------------------------------------
# Synthetic lesion data

LESION_COUNT_PROBS = (0.2, 0.4, 0.25, 0.15)  # 0..3 lesions per slice


def _smooth_noise(rng, h, w, cell=8, amp=1.0):
    """Low-frequency noise: coarse grid, bilinearly interpolated up."""
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.normal(0.0, 1.0, size=(gh, gw))
    ys = np.linspace(0, gh - 1.001, h)
    xs = np.linspace(0, gw - 1.001, w)
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    ty = (ys - y0)[:, None]
    tx = (xs - x0)[None, :]
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x0 + 1)]
    g10 = grid[np.ix_(y0 + 1, x0)]
    g11 = grid[np.ix_(y0 + 1, x0 + 1)]
    top = g00 * (1 - tx) + g01 * tx
    bot = g10 * (1 - tx) + g11 * tx
    return amp * (top * (1 - ty) + bot * ty)


def _blob_mask(rng, h, w, cy, cx, area):
    """Rasterize a noisy ellipse of roughly the requested pixel area."""
    aspect = rng.uniform(0.6, 1.6)
    r0 = np.sqrt(area / np.pi)
    ry = max(1.0, r0 * aspect)
    rx = max(1.0, r0 / aspect)
    yy, xx = np.mgrid[0:h, 0:w]
    dy = (yy - cy) / ry
    dx = (xx - cx) / rx
    theta = np.arctan2(dy, dx)
    wobble = np.ones_like(theta)
    for harmonic in (2, 3, 5):
        wobble += 0.12 * rng.normal() * np.sin(harmonic * theta + rng.uniform(0, 2 * np.pi))
    mask = (dy * dy + dx * dx) < np.maximum(wobble, 0.3) ** 2
    mask[int(round(cy)) % h, int(round(cx)) % w] = True  # at least one pixel
    return mask


def _synth_one(rng, h, w, difficulty):
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = h / 2.0, w / 2.0
    ry = h * rng.uniform(0.38, 0.45)
    rx = w * rng.uniform(0.38, 0.45)
    brain = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) < 1.0

    image = np.full((h, w), 0.02, dtype=np.float64)
    texture = _smooth_noise(rng, h, w, cell=max(4, h // 8), amp=0.06)
    image[brain] = 0.60 + texture[brain]

    mask = np.zeros((h, w), dtype=bool)
    n_lesions = rng.choice(len(LESION_COUNT_PROBS), p=LESION_COUNT_PROBS)
    max_area = 0.04 * h * w
    for _ in range(n_lesions):
        for _attempt in range(50):
            ly = rng.uniform(0.25 * h, 0.75 * h)
            lx = rng.uniform(0.25 * w, 0.75 * w)
            if brain[int(ly), int(lx)]:
                break
        if difficulty == "easy":
            area = float(np.clip(np.exp(rng.normal(4.5, 0.6)), 40.0, max_area))
        else:
            area = float(np.clip(np.exp(rng.normal(3.4, 0.9)), 6.0, max_area))
        blob = _blob_mask(rng, h, w, ly, lx, area) & brain
        mask |= blob

    if difficulty == "easy":
        # hyperintense blobs: the brightest structure in the slice, so the
        # class is separable from intensity alone
        lesion_level = 0.97
    else:
        lesion_level = 0.38
    image[mask] = lesion_level + 0.04 * texture[mask]

    if difficulty == "hard":
        n_distract = rng.choice(3, p=(0.3, 0.4, 0.3))
        for _ in range(n_distract):
            dy_ = rng.uniform(0.2 * h, 0.8 * h)
            dx_ = rng.uniform(0.2 * w, 0.8 * w)
            blob = _blob_mask(rng, h, w, dy_, dx_, rng.uniform(8, 40)) & brain & ~mask
            image[blob] = 0.34

    image = np.clip(image, 0.0, 1.0)
    # quantize to the 16-bit grid so PNG round-trips are exact
    image = np.round(image * 65535.0) / 65535.0
    return image.astype(np.float32), mask.astype(np.uint8)


def synth_dataset(n, size, seed, difficulty="easy", slices_per_subject=4):
    """Generate brain-like slices with 0..3 lesion blobs.

    Deterministic per seed; lesion areas follow a long-tailed lognormal.
    ``easy`` lesions are large and hyperintense (separable by intensity
    alone); ``hard`` lesions are dark, smaller, and accompanied by dark
    distractor tissue that is not in the mask.
    """
    h, w = size
    if h % 16 or w % 16:
        raise ShapeError(f"synthetic size {size} must be divisible by 16")
    if difficulty not in ("easy", "hard"):
        raise ValueError(f"difficulty must be 'easy' or 'hard', got {difficulty!r}")
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        image, mask = _synth_one(rng, h, w, difficulty)
        samples.append(SamplePair(
            image=Tensor(image.reshape(1, 1, h, w)),
            mask=mask,
            subject_id=f"synth{i // slices_per_subject:04d}",
            slice_index=i % slices_per_subject,
        ))
    return samples


# ---------------------------------------------------------------------------
# Lesion-size statistics


@dataclass
class LesionSizeHistogram:
    edges: list                      # bins + 1 edges, pixels
    counts: dict = field(default_factory=dict)  # split -> per-bin counts


def lesion_size_histogram(samples, manifest=None, bins=10) -> LesionSizeHistogram:
    """Per-split histogram of lesion pixel counts over lesion-bearing samples."""
    sizes = {"train": [], "val": [], "test": []}
    for s in samples:
        count = int(s.mask.sum())
        if count == 0:
            continue
        split = manifest.split_of(s.subject_id) if manifest else "train"
        if split is not None:
            sizes[split].append(count)
    all_sizes = [v for vs in sizes.values() for v in vs]
    top = max(all_sizes) if all_sizes else 1
    edges = np.linspace(0, top, bins + 1)
    edges[-1] = top + 1  # right-open bins covering the max size
    counts = {
        name: list(np.histogram(vals, bins=edges)[0].astype(int))
        for name, vals in sizes.items()
    }
    return LesionSizeHistogram(edges=list(edges), counts=counts)


def write_histogram_csv(hist: LesionSizeHistogram, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "train", "val", "test"])
        for i in range(len(hist.edges) - 1):
            writer.writerow([
                repr(hist.edges[i]), repr(hist.edges[i + 1]),
                hist.counts["train"][i], hist.counts["val"][i],
                hist.counts["test"][i],
            ])


# ---------------------------------------------------------------------------
# On-disk dataset


def save_dataset(samples, root):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    for s in samples:
        stem = f"{s.subject_id}_{s.slice_index:04d}.png"
        img16 = np.round(s.image.data[0, 0] * 65535.0).astype(np.uint16)
        Image.fromarray(img16).save(os.path.join(root, "images", stem))
        Image.fromarray((s.mask * 255).astype(np.uint8), mode="L").save(
            os.path.join(root, "masks", stem))


def load_dataset(root):
    """Load and validate image/mask pairs; ordered by (subject, slice)."""
    images_dir = os.path.join(root, "images")
    masks_dir = os.path.join(root, "masks")
    if not os.path.isdir(images_dir):
        return []
    samples = []
    for name in sorted(os.listdir(images_dir)):
        if not name.endswith(".png"):
            continue
        stem = name[:-4]
        if "_" not in stem:
            raise DatasetError(f"{name}: expected '<subject>_<slice>.png'")
        subject_id, slice_str = stem.rsplit("_", 1)
        mask_path = os.path.join(masks_dir, name)
        if not os.path.isfile(mask_path):
            raise DatasetError(f"{name}: missing mask file {mask_path}")
        img = np.asarray(Image.open(os.path.join(images_dir, name)), dtype=np.float64)
        img = (img / 65535.0).astype(np.float32)
        mask_raw = np.asarray(Image.open(mask_path))
        if mask_raw.shape != img.shape:
            raise DatasetError(
                f"{name}: image dims {img.shape} != mask dims {mask_raw.shape}"
            )
        values = set(np.unique(mask_raw).tolist())
        if not values <= {0, 1, 255}:
            raise DatasetError(f"{name}: non-binary mask values {sorted(values)}")
        mask = (mask_raw > 0).astype(np.uint8)
        samples.append(SamplePair(
            image=Tensor(img.reshape(1, 1, *img.shape)),
            mask=mask,
            subject_id=subject_id,
            slice_index=int(slice_str),
        ))
    samples.sort(key=lambda s: (s.subject_id, s.slice_index))
    return samples
