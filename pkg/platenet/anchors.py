"""
Anchor pyramid generation and best-IOU coverage analysis of box size distributions.
"""
import csv
import dataclasses
import logging

import numpy as np

from platenet import PlatenetError


logger = logging.getLogger("platenet")


class AnchorError(PlatenetError): pass


@dataclasses.dataclass(frozen=True)
class BoxSize:
    height: float
    width: float

    def __post_init__(self):
        if not (self.height > 0 and self.width > 0):
            raise AnchorError("Box sizes must be strictly positive, got {}x{}".format(self.height, self.width))

    @property
    def area(self):
        return self.height * self.width


# Minimum plate sizes as height x width, 15 levels at scale 1.3 give 90 anchors
PLATE_BASE_SIZES = (
    BoxSize(10, 10),
    BoxSize(10, 20),
    BoxSize(10, 30),
    BoxSize(10, 40),
    BoxSize(10, 50),
    BoxSize(30, 14),
)


@dataclasses.dataclass(frozen=True)
class PyramidConfig:
    base_sizes: tuple = PLATE_BASE_SIZES
    num_levels: int = 15
    scale: float = 1.3

    @classmethod
    def from_dict(cls, config):
        """
        Build from the run config keys anchor_base_sizes ([[h, w], ...]), anchor_levels and anchor_scale.
        """
        return cls(
            base_sizes=tuple(BoxSize(float(h), float(w)) for h, w in config["anchor_base_sizes"]),
            num_levels=config["anchor_levels"],
            scale=config["anchor_scale"],
        )


@dataclasses.dataclass(frozen=True)
class AnchorSet:
    anchors: tuple
    provenance: PyramidConfig = None

    def __len__(self):
        return len(self.anchors)

    def __getitem__(self, index):
        return self.anchors[index]

    def as_array(self):
        """(A, 2) array of [height, width] rows."""
        return np.array([[a.height, a.width] for a in self.anchors], dtype=np.float64).reshape(-1, 2)

    @classmethod
    def from_array(cls, array, provenance=None):
        return cls(tuple(BoxSize(float(h), float(w)) for h, w in np.asarray(array).reshape(-1, 2)), provenance)


def generate_pyramid(config):
    """
    Anchor (i, k) is base_sizes[i] scaled by scale**k, ordered base-major, level-minor.
    """
    if not config.base_sizes:
        raise AnchorError("Anchor pyramid needs at least one base size")
    if not config.scale > 1:
        raise AnchorError("Pyramid scale must be greater than 1, got {}".format(config.scale))
    if config.num_levels < 1:
        raise AnchorError("Pyramid needs at least one level, got {}".format(config.num_levels))
    anchors = []
    for base in config.base_sizes:
        for level in range(config.num_levels):
            factor = config.scale ** level
            anchors.append(BoxSize(base.height * factor, base.width * factor))
    logger.debug("Generated %d anchors from %d base sizes", len(anchors), len(config.base_sizes))
    return AnchorSet(tuple(anchors), config)


def iou(a, b):
    """
    Intersection over union of two (x1, y1, x2, y2) boxes.
    A box without positive area has IOU 0 against anything, itself included.
    """
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        return 0.0
    inter_w = min(ax2, bx2) - max(ax1, bx1)
    inter_h = min(ay2, by2) - max(ay1, by1)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    return float(inter / (area_a + area_b - inter))


def size_iou(box, anchors):
    """
    IOU of box against every anchor with both co-centered, as an (A,) array.
    """
    sizes = anchors.as_array() if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    inter = np.minimum(sizes[:, 0], box.height) * np.minimum(sizes[:, 1], box.width)
    union = sizes[:, 0] * sizes[:, 1] + box.area - inter
    return inter / union


def best_anchor(box, anchors):
    """
    Return (anchor index, IOU) of the anchor overlapping box the most, lowest index on ties.
    """
    if len(anchors) == 0:
        raise AnchorError("Cannot pick a best anchor from an empty anchor set")
    overlaps = size_iou(box, anchors)
    index = int(np.argmax(overlaps))
    return index, float(overlaps[index])


@dataclasses.dataclass
class CoverageReport:
    min_best_iou: float
    mean_best_iou: float
    histogram: list
    assignments: list

    def summary(self):
        return {"min": self.min_best_iou, "mean": self.mean_best_iou}


def coverage_stats(boxes, anchors, bins=10):
    """
    Best anchor and IOU of every box, summarized by min, mean and a histogram over [0, 1].
    Histogram entries are (bin_low, bin_high, count).
    """
    boxes = list(boxes)
    if not boxes:
        raise AnchorError("Coverage analysis needs at least one box")
    assignments = []
    for box in boxes:
        index, overlap = best_anchor(box, anchors)
        assignments.append((box, index, overlap))
    best = np.array([overlap for _, _, overlap in assignments])
    counts, edges = np.histogram(best, bins=bins, range=(0.0, 1.0))
    histogram = [(float(edges[i]), float(edges[i + 1]), int(count)) for i, count in enumerate(counts)]
    # Summation rounding can put the mean below the min when all values are equal
    minimum = float(best.min())
    mean = max(minimum, float(best.mean()))
    return CoverageReport(minimum, mean, histogram, assignments)


def write_anchors_csv(anchors, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["index", "height", "width"])
        for index, anchor in enumerate(anchors.anchors):
            writer.writerow([index, "{:.6f}".format(anchor.height), "{:.6f}".format(anchor.width)])


def write_coverage_csv(report, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["box_h", "box_w", "best_anchor_index", "best_iou"])
        for box, index, overlap in report.assignments:
            writer.writerow(["{:.6f}".format(box.height), "{:.6f}".format(box.width), index, "{:.6f}".format(overlap)])


def write_coverage_summary(report, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["min", "mean"])
        writer.writerow(["{:.6f}".format(report.min_best_iou), "{:.6f}".format(report.mean_best_iou)])


def write_histogram_csv(report, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["bin_low", "bin_high", "count"])
        for low, high, count in report.histogram:
            writer.writerow(["{:.1f}".format(low), "{:.1f}".format(high), count])
