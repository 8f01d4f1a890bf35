"""Sample ingestion (binary PPM/PGM), normalisation and seeded splits."""
from __future__ import annotations

import math
import os
import random
from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigurationError, interpolation_matrix

IGNORE = 255
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ParseError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class LabelError(ValueError):
    pass


# ------------------------------------------------------------------- netpbm

def _read_token(blob, pos):
    n = len(blob)
    while pos < n:
        ch = blob[pos:pos + 1]
        if ch == b"#":
            while pos < n and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of header", start)
    return blob[start:pos], start, pos


def parse_netpbm(blob, expect=None):
    """Decode a binary P5 (grey) or P6 (RGB) image with maxval <= 255.

    Returns a uint8 array of shape (H, W) for P5 and (H, W, 3) for P6.
    """
    magic, start, pos = _read_token(blob, 0)
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r}, expected P5 or P6", start)
    if expect is not None and magic != expect:
        raise ParseError(f"expected {expect.decode()} image, found {magic.decode()}", start)
    values = []
    for label in ("width", "height", "maxval"):
        tok, start, pos = _read_token(blob, pos)
        if not tok.isdigit():
            raise ParseError(f"{label} is not a decimal integer: {tok!r}", start)
        values.append(int(tok))
    width, height, maxval = values
    if width < 1 or height < 1:
        raise ParseError(f"non-positive image size {width}x{height}", start)
    if not 0 < maxval < 256:
        raise ParseError(f"only 8-bit images are supported, maxval={maxval}", start)
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after maxval", pos)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    if len(blob) - pos < size:
        raise ParseError(f"truncated pixel data: need {size} bytes, have {len(blob) - pos}", pos)
    pixels = np.frombuffer(blob, dtype=np.uint8, count=size, offset=pos)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return pixels.reshape(shape).copy(), maxval


def read_ppm(path):
    with open(path, "rb") as fh:
        return parse_netpbm(fh.read(), b"P6")


def read_pgm(path):
    with open(path, "rb") as fh:
        return parse_netpbm(fh.read(), b"P5")


def write_ppm(path, rgb):
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def write_pgm(path, grey):
    grey = np.asarray(grey, dtype=np.uint8)
    h, w = grey.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(grey).tobytes())


# -------------------------------------------------------------------- resize

def resize_image(img, out_h, out_w):
    """Bilinear (half-pixel) resize of a float (C, H, W) array."""
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img
    ry = interpolation_matrix(h, out_h)
    rx = interpolation_matrix(w, out_w)
    return (ry @ img @ rx.T).astype(img.dtype)


def nearest_indices(in_size, out_size):
    src = np.floor((np.arange(out_size) + 0.5) * in_size / out_size).astype(np.int64)
    return np.minimum(src, in_size - 1)


def resize_labels(labels, out_h, out_w):
    """Nearest-neighbour resize of an integer label map; values are never mixed."""
    h, w = labels.shape
    if (h, w) == (out_h, out_w):
        return labels.copy()
    return labels[nearest_indices(h, out_h)[:, None], nearest_indices(w, out_w)[None, :]]


# ------------------------------------------------------------------- samples

@dataclass
class SegSample:
    image: np.ndarray   # float32 (1, 3, H, W) in [0, 1]
    label: np.ndarray   # uint8/int (H, W), classes or IGNORE
    name: str = ""


def validate_labels(label, num_classes):
    bad = (label >= num_classes) & (label != IGNORE)
    if bad.any():
        values = sorted(set(np.unique(label[bad]).tolist()))
        raise LabelError(f"label values {values} outside 0..{num_classes - 1} (and not {IGNORE})")


def load_sample(image_path, label_path, target=None, num_classes=20):
    rgb, maxval = read_ppm(image_path)
    label, _ = read_pgm(label_path)
    if rgb.shape[:2] != label.shape:
        raise ConfigurationError(
            f"{image_path}: image {rgb.shape[:2]} and label {label.shape} are not aligned"
        )
    validate_labels(label, num_classes)
    img = rgb.transpose(2, 0, 1).astype(np.float32) / np.float32(maxval)
    if target is not None:
        img = np.clip(resize_image(img, *target), 0.0, 1.0)
        label = resize_labels(label, *target)
    return SegSample(img[None], label.astype(np.int64), os.path.basename(image_path))


def normalize(img, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Per-channel ``(x - mean) / std`` on a (N, 3, H, W) or (3, H, W) array."""
    img = np.asarray(img)
    shape = (-1, 1, 1)
    m = np.asarray(mean, dtype=img.dtype).reshape(shape)
    s = np.asarray(std, dtype=img.dtype).reshape(shape)
    return (img - m) / s


# ------------------------------------------------------------------ manifest

@dataclass
class Manifest:
    entries: list                      # [(image_path, label_path)]
    num_classes: int = 20
    target: tuple | None = None
    root: str = ""

    def __len__(self):
        return len(self.entries)

    def load(self, index):
        img, lab = self.entries[index]
        return load_sample(img, lab, self.target, self.num_classes)


def read_manifest(path, num_classes=20, target=None, check=True):
    """Read ``image<TAB>label`` lines; relative paths resolve against the manifest's folder."""
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ConfigurationError(f"{path}:{lineno}: expected image<TAB>label")
            pair = tuple(p if os.path.isabs(p) else os.path.join(root, p) for p in (s.strip() for s in parts))
            if check:
                for p in pair:
                    if not os.path.exists(p):
                        raise ConfigurationError(f"{path}:{lineno}: missing file {p}")
            entries.append(pair)
    return Manifest(entries, num_classes, target, root)


def write_manifest(path, entries):
    root = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as fh:
        for img, lab in entries:
            fh.write(f"{os.path.relpath(img, root)}\t{os.path.relpath(lab, root)}\n")


# -------------------------------------------------------------------- splits

@dataclass
class SplitPlan:
    seed: int
    sizes: list
    order: list = field(repr=False)
    parts: list = field(repr=False)


def seeded_split(n, sizes, seed=42):
    """Fisher-Yates shuffle of ``range(n)`` cut into consecutive parts.

    A size of ``None`` takes whatever is left.  The parts are disjoint and,
    when the sizes add up to ``n``, exhaustive.
    """
    if hasattr(n, "__len__"):
        n = len(n)
    fixed = sum(s for s in sizes if s is not None)
    if fixed > n or any(s is not None and s < 0 for s in sizes):
        raise ConfigurationError(f"split sizes {sizes} oversubscribe {n} samples")
    if sum(1 for s in sizes if s is None) > 1:
        raise ConfigurationError("at most one split size may be open-ended")
    resolved = [n - fixed if s is None else s for s in sizes]
    order = list(range(n))
    random.Random(seed).shuffle(order)
    parts, start = [], 0
    for s in resolved:
        parts.append(order[start:start + s])
        start += s
    return SplitPlan(seed, resolved, order, parts)


def halving_subsets(train_indices, levels, first=1):
    """Nested prefixes of sizes ``floor(n / 2**k)`` for k = first .. first + levels - 1.

    2975 with first=1, levels=5 gives 1487, 743, 371, 185, 92; 367 with
    first=0, levels=3 gives 367, 183, 91.
    """
    n = len(train_indices)
    return [list(train_indices[: n // (2 ** k)]) for k in range(first, first + levels)]


# ----------------------------------------------------------------- synthetic

def synthetic_samples(n, height=64, width=128, num_classes=20, classes_used=4, seed=0, noise=0.05):
    """Seeded toy scenes: coloured rectangles on a background, one colour per class.

    Used for smoke tests and the overfit probe; the task is easy by design.
    """
    rng = np.random.default_rng(seed)
    palette = rng.uniform(0, 1, size=(num_classes, 3)).astype(np.float32)
    out = []
    for i in range(n):
        label = np.zeros((height, width), dtype=np.int64)
        for cls in range(1, classes_used):
            h = int(rng.integers(height // 4, height // 2 + 1))
            w = int(rng.integers(width // 4, width // 2 + 1))
            y = int(rng.integers(0, height - h + 1))
            x = int(rng.integers(0, width - w + 1))
            label[y:y + h, x:x + w] = cls
        img = palette[label].transpose(2, 0, 1)
        img = img + noise * rng.standard_normal(img.shape).astype(np.float32)
        out.append(SegSample(np.clip(img, 0, 1)[None].astype(np.float32), label, f"synthetic{i}"))
    return out
