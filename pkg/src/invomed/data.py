"""Dataset ingestion, preprocessing, splits, and the synthetic blob task.

Inputs are scaled to [0, 1] floats in H x W x C layout; segmentation
masks are H x W x 1 and strictly binary after thresholding at half the
maximum intensity. PPM/PGM files go through the built-in codec so test
fixtures need no image library; PNG/JPEG fall back to Pillow.

The synthetic task draws one elliptical blob per image and labels it by
blob-center side (class 0 iff the center lies in the left half), so the
discriminative feature is purely positional — the kind of cue a
position-wise dynamic kernel is supposed to pick up.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import Rng

__all__ = [
    "Sample",
    "SplitDataset",
    "load_classification_dataset",
    "load_image",
    "load_manifest",
    "load_segmentation_dataset",
    "read_pnm",
    "resize_bilinear",
    "resize_nearest",
    "split_dataset",
    "synth_blob_params",
    "synth_blobs",
    "write_pnm",
]

log = logging.getLogger(__name__)

RASTER_SUFFIXES = (".ppm", ".pgm", ".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class Sample:
    input: np.ndarray           # [H,W,C] in [0,1]
    target: object              # int class index, or [H,W,1] binary mask
    source_id: str = ""


@dataclass
class SplitDataset:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    seed: int = 0
    ratios: tuple = (0.8, 0.9)

    def __iter__(self):
        return iter((self.train, self.val, self.test))


# ---------------------------------------------------------------------------
# PPM / PGM codec (binary P5/P6, 8-bit)

def _read_pnm_tokens(data: bytes, count: int, pos: int):
    tokens = []
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        tokens.append(data[start:pos])
    return tokens, pos


def read_pnm(path: str) -> np.ndarray:
    """Decode binary PGM (P5) or PPM (P6) to a uint8 [H,W] / [H,W,3] array."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    channels = 1 if data[:2] == b"P5" else 3
    tokens, pos = _read_pnm_tokens(data, 3, 2)
    width, height, maxval = (int(t) for t in tokens)
    if not 0 < maxval < 256:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    payload = data[pos : pos + width * height * channels]
    if len(payload) != width * height * channels:
        raise ValueError(f"{path}: truncated payload")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return arr[..., 0] if channels == 1 else arr


def write_pnm(path: str, arr: np.ndarray) -> None:
    """Encode a uint8 [H,W] array as P5 or [H,W,3] as P6."""
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim == 2:
        magic, h, w = b"P5", arr.shape[0], arr.shape[1]
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic, h, w = b"P6", arr.shape[0], arr.shape[1]
    else:
        raise ValueError(f"cannot encode shape {arr.shape} as PNM")
    with open(path, "wb") as f:
        f.write(magic + b"\n" + f"{w} {h}\n255\n".encode())
        f.write(arr.tobytes(order="C"))


def load_image(path: str) -> np.ndarray:
    """Any supported raster file -> float [H,W,C] scaled to [0,1]."""
    suffix = os.path.splitext(path)[1].lower()
    if suffix in (".ppm", ".pgm"):
        raw = read_pnm(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            raw = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    arr = raw.astype(np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


# ---------------------------------------------------------------------------
# directory loaders

def load_classification_dataset(root_dir: str) -> list[Sample]:
    """One subdirectory per class; class names map to indices in
    lexicographic order. Unreadable files are skipped with a warning."""
    classes = sorted(d for d in os.listdir(root_dir)
                     if os.path.isdir(os.path.join(root_dir, d)))
    if not classes:
        raise ValueError(f"no class directories under {root_dir}")
    samples: list[Sample] = []
    skipped = 0
    for label, cls in enumerate(classes):
        cdir = os.path.join(root_dir, cls)
        files = sorted(f for f in os.listdir(cdir)
                       if f.lower().endswith(RASTER_SUFFIXES))
        if not files:
            raise ValueError(f"class directory '{cls}' has no images")
        for fname in files:
            path = os.path.join(cdir, fname)
            try:
                img = load_image(path)
            except Exception as e:  # noqa: BLE001 - any decode failure is a skip
                skipped += 1
                log.warning("skipping unreadable %s: %s", path, e)
                continue
            samples.append(Sample(img, label, source_id=f"{cls}/{fname}"))
    if skipped:
        log.warning("%d unreadable file(s) skipped under %s", skipped, root_dir)
    return samples


def binarize_mask(mask: np.ndarray) -> np.ndarray:
    """Threshold at half the maximum intensity; all-zero stays all-zero."""
    peak = float(mask.max())
    if peak <= 0:
        return np.zeros_like(mask)
    return (mask >= 0.5 * peak).astype(np.float64)


def load_segmentation_dataset(images_dir: str, masks_dir: str) -> list[Sample]:
    """Pair images with masks by filename stem (extension-insensitive)."""
    mask_by_stem = {}
    for f in sorted(os.listdir(masks_dir)):
        if f.lower().endswith(RASTER_SUFFIXES):
            mask_by_stem[os.path.splitext(f)[0]] = os.path.join(masks_dir, f)
    samples: list[Sample] = []
    for fname in sorted(os.listdir(images_dir)):
        if not fname.lower().endswith(RASTER_SUFFIXES):
            continue
        stem = os.path.splitext(fname)[0]
        mask_path = mask_by_stem.get(stem)
        if mask_path is None:
            log.warning("no mask for image %s, skipping", fname)
            continue
        img = load_image(os.path.join(images_dir, fname))
        mask = binarize_mask(load_image(mask_path)[..., :1])
        samples.append(Sample(img, mask, source_id=stem))
    return samples


def load_manifest(path: str) -> list[Sample]:
    """Line-based ``path<TAB>label`` manifest; paths relative to the file."""
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rel, label = line.split("\t")
            samples.append(Sample(load_image(os.path.join(base, rel)),
                                  int(label), source_id=rel))
    return samples


# ---------------------------------------------------------------------------
# resizing

def resize_bilinear(image: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an [H,W,C] image.

    Sample grid: out pixel i maps to i*(H-1)/(H_out-1) (0 when H_out=1),
    so the four corners are preserved exactly.
    """
    if h_out < 1 or w_out < 1:
        raise ValueError("target dims must be positive")
    h, w = image.shape[:2]
    if (h, w) == (h_out, w_out):
        return image.copy()
    ys = np.linspace(0, h - 1, h_out) if h_out > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, w_out) if w_out > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    dy = (ys - y0)[:, None, None]
    dx = (xs - x0)[None, :, None]
    img = image if image.ndim == 3 else image[..., None]
    top = img[y0][:, x0] * (1 - dx) + img[y0][:, x1] * dx
    bot = img[y1][:, x0] * (1 - dx) + img[y1][:, x1] * dx
    out = top * (1 - dy) + bot * dy
    return out if image.ndim == 3 else out[..., 0]


def resize_nearest(image: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Nearest-neighbor resize (used for masks, which are re-binarized)."""
    h, w = image.shape[:2]
    ys = np.clip(np.round(np.linspace(0, h - 1, h_out)).astype(int), 0, h - 1)
    xs = np.clip(np.round(np.linspace(0, w - 1, w_out)).astype(int), 0, w - 1)
    return image[ys][:, xs].copy()


def resize_sample(sample: Sample, size: int) -> Sample:
    img = resize_bilinear(sample.input, size, size)
    target = sample.target
    if isinstance(target, np.ndarray):
        target = binarize_mask(resize_nearest(target, size, size))
    return Sample(img, target, sample.source_id)


# ---------------------------------------------------------------------------
# splitting

def split_dataset(samples: list[Sample], seed: int = 0, stratified: bool = False,
                  ratios: tuple = (0.8, 0.9)) -> SplitDataset:
    """Deterministic shuffle + split: carve (1-ratios[0]) as test, then
    split the remainder ratios[1] / (1-ratios[1]) into train / val.

    100 samples at the (0.8, 0.9) defaults -> 72 / 8 / 20. Stratified
    mode applies the carve per class and needs >= 3 samples per class.
    """
    split = SplitDataset(seed=seed, ratios=ratios)
    groups: dict[object, list[Sample]]
    if stratified:
        groups = {}
        for s in samples:
            groups.setdefault(s.target, []).append(s)
        for label, grp in groups.items():
            if len(grp) < 3:
                raise ValueError(f"class {label} has {len(grp)} sample(s); need >= 3")
    else:
        groups = {None: list(samples)}
    rng = Rng(seed)
    for key in sorted(groups, key=repr):
        grp = groups[key]
        order = rng.permutation(len(grp))
        shuffled = [grp[i] for i in order]
        n_test = int(round(len(grp) * (1.0 - ratios[0])))
        rest = shuffled[: len(grp) - n_test]
        n_val = int(round(len(rest) * (1.0 - ratios[1])))
        split.test.extend(shuffled[len(grp) - n_test:])
        split.val.extend(rest[len(rest) - n_val:] if n_val else [])
        split.train.extend(rest[: len(rest) - n_val])
    return split


# ---------------------------------------------------------------------------
# synthetic blobs

def _ellipse_mask(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0).astype(np.float64)


def synth_blob_params(n: int, image_size: int, seed: int) -> list[dict]:
    """Draw the ellipse parameters for :func:`synth_blobs` (same stream).

    Alternating labels keep the classes balanced; class-0 centers stay a
    full pixel left of the midline, class-1 centers a pixel right of it.
    """
    rng = Rng(seed)
    hw = image_size
    out = []
    for i in range(n):
        label = i % 2
        r_lo, r_hi = 0.08 * hw, 0.18 * hw
        ry = r_lo + (r_hi - r_lo) * float(rng.uniform([1])[0])
        rx = r_lo + (r_hi - r_lo) * float(rng.uniform([1])[0])
        cy = ry + (hw - 2 * ry) * float(rng.uniform([1])[0])
        half = hw / 2.0
        lo, hi = (rx, half - 1.0) if label == 0 else (half + 1.0, hw - rx)
        lo, hi = min(lo, hi - 1e-6), max(hi, lo + 1e-6)
        cx = lo + (hi - lo) * float(rng.uniform([1])[0])
        out.append({"label": label, "cy": cy, "cx": cx, "ry": ry, "rx": rx})
    return out


def synth_blobs(task: str, n: int, image_size: int = 28, seed: int = 0,
                noise: float = 0.05) -> list[Sample]:
    """Elliptical blobs on dark backgrounds.

    Classification: class 0 iff the blob center is in the left half
    (strictly; centers are kept off the midline). Segmentation: the
    exact rasterized ellipse is the mask. Noise is additive Gaussian,
    inputs are clipped back to [0, 1]. Same seed => same samples.
    """
    if task not in ("cls", "seg"):
        raise ValueError("task must be 'cls' or 'seg'")
    if n < 1:
        raise ValueError("need n >= 1")
    hw = image_size
    noise_rng = Rng(seed).child(1)
    samples = []
    for i, p in enumerate(synth_blob_params(n, image_size, seed)):
        mask = _ellipse_mask(hw, hw, p["cy"], p["cx"], p["ry"], p["rx"])
        base = 0.15 + 0.65 * mask
        img = np.repeat(base[..., None], 3, axis=2)
        img = np.clip(img + noise * noise_rng.normal([hw, hw, 3]), 0.0, 1.0)
        target = p["label"] if task == "cls" else mask[..., None]
        samples.append(Sample(img, target, source_id=f"blob{i:04d}"))
    return samples


def blob_center(sample: Sample) -> tuple[float, float]:
    """Centroid (y, x) of a segmentation sample's mask."""
    ys, xs = np.nonzero(sample.target[..., 0])
    return float(ys.mean()), float(xs.mean())


def dataset_digest(samples: list[Sample]) -> bytes:
    """Stable byte digest of a sample list (determinism checks)."""
    import hashlib

    h = hashlib.sha256()
    for s in samples:
        h.update(s.input.tobytes())
        if isinstance(s.target, np.ndarray):
            h.update(s.target.tobytes())
        else:
            h.update(int(s.target).to_bytes(4, "little"))
        h.update(s.source_id.encode())
    return h.digest()
