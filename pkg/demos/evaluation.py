"""Class IoU, category IoU and the table layout, on a hand-made confusion matrix."""
import numpy as np

from pdfnet.metrics import (
    CITYSCAPES_CLASSES, CITYSCAPES_SCORED, category_iou, cityscapes_category_map, iou_table, mean_iou,
)


def main():
    rng = np.random.default_rng(0)
    cm = np.diag(rng.integers(500, 2000, size=20)) + rng.integers(0, 60, size=(20, 20))
    cm[19] = 0  # nothing labelled background
    names = list(CITYSCAPES_CLASSES)
    print(iou_table([("random", cm)], names, CITYSCAPES_SCORED))
    print(f"mIoU over 19 classes: {mean_iou(cm, CITYSCAPES_SCORED):.4f}")

    per, mean = category_iou(cm, cityscapes_category_map(), CITYSCAPES_SCORED)
    for cat, v in per.items():
        print(f"  {cat:<13}{v:.4f}")
    print(f"category mean: {mean:.4f}")

    # merging classes does not always raise the mean
    small = np.array([[2, 0, 3], [1, 3, 0], [5, 5, 0]])
    _, cat_mean = category_iou(small, {0: "x", 1: "x", 2: "y"})
    print(f"\n3-class example: class mean {mean_iou(small):.4f}, category mean {cat_mean:.4f}")


if __name__ == "__main__":
    main()
