"""Confusion-matrix based segmentation scores."""
from __future__ import annotations

import numpy as np

from .data import IGNORE
from .tensor import ConfigurationError

CITYSCAPES_CLASSES = (
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic light", "traffic sign",
    "vegetation", "terrain", "sky", "person", "rider", "car", "truck", "bus", "train",
    "motorcycle", "bicycle", "background",
)
# 19 scored classes; background (index 19) is trained on but not averaged
CITYSCAPES_SCORED = tuple(range(19))
CITYSCAPES_CATEGORIES = {
    "flat": ("road", "sidewalk"),
    "construction": ("building", "wall", "fence"),
    "object": ("pole", "traffic light", "traffic sign"),
    "nature": ("vegetation", "terrain"),
    "sky": ("sky",),
    "human": ("person", "rider"),
    "vehicle": ("car", "truck", "bus", "train", "motorcycle", "bicycle"),
}


class ConfusionMatrix:
    """K x K pixel counts; entry (t, p) counts true class t predicted as p."""

    def __init__(self, num_classes):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, true):
        pred = np.asarray(pred)
        true = np.asarray(true)
        if pred.shape != true.shape:
            raise ValueError(f"prediction shape {pred.shape} != label shape {true.shape}")
        keep = true != IGNORE
        t = true[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        k = self.num_classes
        for arr, what in ((t, "label"), (p, "prediction")):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ValueError(f"{what} values must lie in 0..{k - 1} or be {IGNORE}")
        self.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other):
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self):
        return int(self.counts.sum())


def accumulate(cm, pred, true):
    return cm.accumulate(pred, true)


def _counts(cm):
    return cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)


def iou_per_class(cm):
    """IoU for every class; NaN where the class never occurs in truth or prediction."""
    c = _counts(cm).astype(np.float64)
    tp = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


def class_iou(cm, k):
    return float(iou_per_class(cm)[k])


def mean_iou(cm, scored=None):
    """Mean IoU over ``scored`` classes, skipping classes with an empty union."""
    ious = iou_per_class(cm)
    if scored is not None:
        ious = ious[list(scored)]
    ious = ious[~np.isnan(ious)]
    return float(ious.mean()) if ious.size else float("nan")


def pixel_accuracy(cm):
    c = _counts(cm)
    total = c.sum()
    return float(np.trace(c) / total) if total else float("nan")


def category_matrix(cm, mapping, scored):
    """Collapse classes into categories; ``mapping`` is {class index: category name}."""
    c = _counts(cm)
    missing = [k for k in scored if k not in mapping]
    if missing:
        raise ConfigurationError(f"scored classes without a category: {missing}")
    names = sorted(set(mapping[k] for k in scored), key=lambda n: min(k for k in scored if mapping[k] == n))
    index = {n: i for i, n in enumerate(names)}
    g = len(names)
    assign = np.full(c.shape[0], g, dtype=np.int64)  # unscored classes go to a rest bucket
    for k in scored:
        assign[k] = index[mapping[k]]
    collapsed = np.zeros((g + 1, g + 1), dtype=np.int64)
    np.add.at(collapsed, (assign[:, None], assign[None, :]), c)
    return names, collapsed


def category_iou(cm, mapping, scored=None):
    """Per-category IoU (dict) and their mean."""
    c = _counts(cm)
    scored = list(range(c.shape[0])) if scored is None else list(scored)
    names, collapsed = category_matrix(c, mapping, scored)
    ious = iou_per_class(collapsed)[: len(names)]
    per = dict(zip(names, ious.tolist()))
    valid = ious[~np.isnan(ious)]
    return per, float(valid.mean()) if valid.size else float("nan")


def cityscapes_category_map(classes=CITYSCAPES_CLASSES):
    lookup = {name: cat for cat, members in CITYSCAPES_CATEGORIES.items() for name in members}
    return {k: lookup[name] for k, name in enumerate(classes) if name in lookup}


def parse_category_map(text, class_names):
    """Read ``class=category`` lines; class may be a name or an index."""
    mapping = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, cat = (s.strip() for s in line.split("=", 1))
        k = int(key) if key.isdigit() else list(class_names).index(key)
        mapping[k] = cat
    return mapping


def iou_table(rows, class_names, scored, fmt="text"):
    """Render ``rows`` = [(label, cm)] as a class-wise IoU table (fractions, 6 digits)."""
    header = ["Method"] + [class_names[k] for k in scored] + ["Average"]
    body = []
    for label, cm in rows:
        ious = iou_per_class(cm)
        cells = [f"{ious[k]:.6g}" for k in scored]
        body.append([label] + cells + [f"{mean_iou(cm, scored):.6g}"])
    if fmt == "csv":
        return "\n".join(",".join(r) for r in [header] + body) + "\n"
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in [header] + body]
    return "\n".join(lines) + "\n"
