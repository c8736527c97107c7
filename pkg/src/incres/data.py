"""Dataset ingestion, splitting, batching and the synthetic two-class generator.

The manifest is a UTF-8 CSV with header ``path,label,split``; labels are
``NORMAL``/``PNEUMONIA`` and splits ``train``/``test``, with paths relative
to the manifest's directory. Images must be binary 8-bit PGM (P5) or PPM
(P6); convert other formats first, e.g. with ImageMagick::

    mogrify -format pgm -colorspace Gray *.jpeg
"""

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

CLASS_NAMES = ("NORMAL", "PNEUMONIA")
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}
SPLITS = ("train", "test")


@dataclass
class Sample:
    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    label: int  # 0 = Normal, 1 = Pneumonia
    id: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"sample {self.id}: label must be 0 or 1, got {self.label}")


@dataclass
class ManifestRow:
    path: str
    label: str
    split: str


@dataclass
class DatasetManifest:
    rows: list = field(default_factory=list)
    class_map: dict = field(default_factory=lambda: dict(CLASS_INDEX))
    root: Path = Path(".")

    def split(self, name):
        return [r for r in self.rows if r.split == name]

    def counts(self):
        return {s: sum(r.split == s for r in self.rows) for s in SPLITS}


def load_manifest(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest: {exc}", path=str(path)) from None
    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["path", "label", "split"]:
        raise DataError("manifest header must be 'path,label,split'", path=str(path), line=1)
    manifest = DatasetManifest(root=path.parent)
    seen = set()
    for lineno, row in enumerate(reader, start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 3:
            raise DataError(f"line {lineno}: expected 3 fields, got {len(row)}",
                            path=str(path), line=lineno)
        p, label, split = (v.strip() for v in row)
        if label not in manifest.class_map:
            raise DataError(f"line {lineno}: unknown label {label!r} "
                            f"(expected one of {', '.join(manifest.class_map)})",
                            path=str(path), line=lineno)
        if split not in SPLITS:
            raise DataError(f"line {lineno}: unknown split {split!r} (expected train or test)",
                            path=str(path), line=lineno)
        if p in seen:
            raise DataError(f"line {lineno}: duplicate path {p!r}", path=str(path), line=lineno)
        seen.add(p)
        manifest.rows.append(ManifestRow(p, label, split))
    return manifest


def write_manifest(manifest, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "split"])
        for r in manifest.rows:
            w.writerow([r.path, r.label, r.split])


# ---------------------------------------------------------------- images

def _read_token(buf, pos):
    """Next whitespace-delimited header token, skipping '#' comments."""
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DataError("truncated image header")
    return buf[start:pos], pos


def decode_pnm(buf, name="<bytes>"):
    """Decode binary PGM/PPM bytes to (H, W, 3) float32 in [0, 1]."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{name}: unsupported image format {magic!r}; only binary PGM (P5) "
                        "and PPM (P6) are decoded natively, convert other files first "
                        "(e.g. `mogrify -format pgm *.jpeg`)", path=name)
    try:
        w, pos = _read_token(buf, 2)
        h, pos = _read_token(buf, pos)
        maxval, pos = _read_token(buf, pos)
        w, h, maxval = int(w), int(h), int(maxval)
    except (DataError, ValueError):
        raise DataError(f"{name}: malformed header", path=name) from None
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise DataError(f"{name}: need positive size and 8-bit maxval, got {w}x{h} max {maxval}",
                        path=name)
    pos += 1  # single whitespace byte ends the header
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    raster = buf[pos:pos + need]
    if len(raster) < need:
        raise DataError(f"{name}: truncated payload ({len(raster)} of {need} bytes)", path=name)
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels).astype(np.float32)
    img /= np.float32(maxval)
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def decode_image(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image: {exc}", path=str(path)) from None
    return decode_pnm(buf, str(path))


def encode_pgm(image):
    """8-bit P5 bytes from an (H, W) or (H, W, C) array in [0, 1] (first channel)."""
    a = np.asarray(image)
    if a.ndim == 3:
        a = a[..., 0]
    px = np.clip(np.rint(a * 255), 0, 255).astype(np.uint8)
    return f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii") + px.tobytes()


def _axis_weights(n_in, n_out):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to the edge
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(image, target):
    """Resize (H, W, C) to (target, target, C) by half-pixel-centred bilinear sampling."""
    img = np.asarray(image)
    H, W = img.shape[:2]
    if H == target and W == target:
        return img.copy()
    y0, y1, fy = _axis_weights(H, target)
    x0, x1, fx = _axis_weights(W, target)
    src = img.astype(np.float64)
    top = src[y0][:, x0] * (1 - fx)[None, :, None] + src[y0][:, x1] * fx[None, :, None]
    bot = src[y1][:, x0] * (1 - fx)[None, :, None] + src[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return out.astype(img.dtype)


def load_samples(manifest, split, size):
    """Decode, resize and label every manifest row of ``split``."""
    out = []
    for r in manifest.split(split):
        img = resize_bilinear(decode_image(manifest.root / r.path), size)
        out.append(Sample(np.clip(img, 0, 1), manifest.class_map[r.label], r.path))
    return out


# ---------------------------------------------------------------- splitting

def stratified_kfold(samples, k, seed):
    """Assign sample ids to ``k`` folds, preserving class proportions.

    Each class is shuffled and dealt round-robin; the deal continues where
    the previous class stopped, so overall fold sizes differ by at most one
    as well as per-class counts.
    """
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    by_class = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s.id)
    for label, ids in sorted(by_class.items()):
        if len(ids) < k:
            raise DataError(f"class {label} has {len(ids)} samples, fewer than k={k}")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    cursor = 0
    for label in sorted(by_class):
        ids = by_class[label]
        for i in rng.permutation(len(ids)):
            folds[cursor % k].append(ids[i])
            cursor += 1
    return folds


def split_train_val(samples, val_fraction, seed):
    """Stratified holdout split; returns (train, val)."""
    rng = np.random.default_rng(seed)
    train, val = [], []
    for label in (0, 1):
        group = [s for s in samples if s.label == label]
        order = rng.permutation(len(group))
        n_val = int(round(len(group) * val_fraction))
        val += [group[i] for i in order[:n_val]]
        train += [group[i] for i in order[n_val:]]
    return train, val


# ---------------------------------------------------------------- batching

def batches(samples, batch_size, seed=0, shuffle=True):
    """One epoch of (images, labels, ids) batches; the last batch may be short."""
    if not samples:
        raise DataError("cannot batch an empty sample set")
    if batch_size < 1:
        raise DataError(f"batch size must be >= 1, got {batch_size}")
    order = (np.random.default_rng(seed).permutation(len(samples)) if shuffle
             else np.arange(len(samples)))
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        out.append((np.stack([s.image for s in chunk]),
                    np.array([s.label for s in chunk], dtype=np.int64),
                    [s.id for s in chunk]))
    return out


# ---------------------------------------------------------------- synthetic

def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = ((xx - cx) * c + (yy - cy) * s) / rx
    v = (-(xx - cx) * s + (yy - cy) * c) / ry
    return (u * u + v * v) <= 1.0


def _opacities(rng, yy, xx, size, x_range):
    img = np.zeros_like(yy)
    for _ in range(rng.integers(3, 6)):
        cy = rng.uniform(0.15, 0.85) * size
        cx = rng.uniform(*x_range) * size
        ry, rx = rng.uniform(0.04, 0.09, size=2) * size
        img = np.maximum(img, rng.uniform(0.35, 0.55)
                         * _ellipse(yy, xx, cy, cx, ry, rx, rng.uniform(0, np.pi)))
    return img


def _blob(rng, yy, xx, size, x_range=(0.3, 0.7)):
    cy = rng.uniform(0.3, 0.7) * size
    cx = rng.uniform(*x_range) * size
    sigma = rng.uniform(0.15, 0.3) * size
    amp = rng.uniform(0.2, 0.6)
    base = rng.uniform(0.05, 0.25)
    return base + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))


def gen_synthetic(n, image_size, seed, task="opacity"):
    """Balanced two-class cartoon radiographs, (size, size, 3) in [0, 1].

    ``task="opacity"``: class 0 is a smooth Gaussian blob at a random
    centre; class 1 adds 3-5 bright elliptical opacities. Blob brightness
    varies more than the opacities shift the mean, so mean intensity alone
    is a poor classifier.

    ``task="position"``: every image carries a blob plus opacities; the
    label says whether the opacities sit in the left (0) or right (1) half.
    Shares low-level features with the opacity task, for transfer tests.
    """
    if n % 2:
        raise DataError(f"n must be even for a balanced set, got {n}")
    if task not in ("opacity", "position"):
        raise DataError(f"unknown synthetic task {task!r}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64) + 0.5
    labels = np.array([0, 1] * (n // 2))
    labels = labels[rng.permutation(n)]
    out = []
    for i, label in enumerate(labels):
        img = _blob(rng, yy, xx, image_size)
        if task == "opacity":
            if label == 1:
                img = np.maximum(img, img + _opacities(rng, yy, xx, image_size, (0.15, 0.85)))
        else:
            x_range = (0.1, 0.45) if label == 0 else (0.55, 0.9)
            img = img + _opacities(rng, yy, xx, image_size, x_range)
        img = img + rng.normal(0, 0.05, img.shape)
        img = np.clip(img, 0, 1).astype(np.float32)
        out.append(Sample(np.repeat(img[:, :, None], 3, axis=2), int(label),
                          f"syn-{task}-{seed}-{i:05d}"))
    return out


def resize_samples(samples, size):
    if all(s.image.shape[0] == size and s.image.shape[1] == size for s in samples):
        return list(samples)
    return [Sample(resize_bilinear(s.image, size), s.label, s.id) for s in samples]


def threshold_baseline_accuracy(samples):
    """Best accuracy of any single threshold on mean pixel intensity (either direction)."""
    feats = np.array([float(s.image.mean()) for s in samples])
    labels = np.array([s.label for s in samples])
    order = np.argsort(feats, kind="stable")
    f, y = feats[order], labels[order]
    n = len(y)
    pos_total = y.sum()
    # predict 1 above the cut: correct = negatives below + positives above
    neg_below = np.concatenate([[0], np.cumsum(1 - y)])
    pos_below = np.concatenate([[0], np.cumsum(y)])
    valid = np.concatenate([[True], f[1:] != f[:-1], [True]])
    up = neg_below + (pos_total - pos_below)
    best = max(up[valid].max(), (n - up)[valid].max())
    return best / n


def image_paths_exist(manifest):
    return [r.path for r in manifest.rows if not os.path.exists(manifest.root / r.path)]
