"""
Grid detector head logic: target encoding, prediction decoding, the composite squared-error loss and non-maximum suppression.

Raw head output for one image has shape (A * (5 + C), S, S).
Per anchor the channels are objectness, tx, ty, tw, th followed by C class logits.
"""
import dataclasses
import logging
import math

import numpy as np

from platenet import PlatenetError
from platenet import imaging
from platenet.anchors import AnchorSet, BoxSize, best_anchor, iou
from platenet.architectures import forward_network
from platenet.layers import ShapeError, softmax


logger = logging.getLogger("platenet")

SATURATION_EPS = 1e-12


class DetectionError(PlatenetError): pass


def sigmoid(x):
    # tanh form does not overflow for large negative x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p, eps=SATURATION_EPS):
    p = np.clip(p, eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


@dataclasses.dataclass(frozen=True)
class GroundTruthBox:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DetectionError("Ground truth box must have positive size, got {}x{}".format(self.w, self.h))

    @classmethod
    def from_corner(cls, x, y, w, h, class_id=0):
        return cls(x + w / 2, y + h / 2, w, h, class_id)

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclasses.dataclass
class Detection:
    cx: float
    cy: float
    w: float
    h: float
    confidence: float
    class_probs: tuple = (1.0,)
    class_id: int = 0
    score: float = None

    def __post_init__(self):
        if self.score is None:
            self.score = self.confidence * max(self.class_probs)

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclasses.dataclass(frozen=True)
class YoloLossConfig:
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    lambda_obj: float = 1.0
    lambda_class: float = 1.0

    def __post_init__(self):
        for field in dataclasses.fields(self):
            if getattr(self, field.name) < 0:
                raise DetectionError("Loss weight {} must be non-negative".format(field.name))


@dataclasses.dataclass
class TargetGrid:
    """
    tensor has shape (A, 5 + C, S, S), mask marks the responsible (anchor, row, col) entries.
    """
    tensor: np.ndarray
    mask: np.ndarray
    collisions: int = 0

    @property
    def num_anchors(self):
        return self.tensor.shape[0]

    @property
    def num_classes(self):
        return self.tensor.shape[1] - 5

    @property
    def grid_size(self):
        return self.tensor.shape[2]


def _anchor_set(anchors):
    return anchors if isinstance(anchors, AnchorSet) else AnchorSet.from_array(anchors)


def encode_targets(boxes, grid_size, anchors, image_size, num_classes=1):
    """
    Assign every box to the cell holding its center and to its best size-IOU anchor.
    When two boxes claim the same cell and anchor the larger one is kept.
    """
    anchors = _anchor_set(anchors)
    if image_size % grid_size:
        raise DetectionError("Grid size {} does not divide image size {}".format(grid_size, image_size))
    cell = image_size / grid_size
    sizes = anchors.as_array()
    tensor = np.zeros((len(anchors), 5 + num_classes, grid_size, grid_size))
    mask = np.zeros((len(anchors), grid_size, grid_size), dtype=bool)
    areas = np.zeros(mask.shape)
    collisions = 0
    for box in boxes:
        if not (0 <= box.cx < image_size and 0 <= box.cy < image_size):
            raise DetectionError("Box center ({}, {}) lies outside the {} px image".format(box.cx, box.cy, image_size))
        if not 0 <= box.class_id < num_classes:
            raise DetectionError("Class id {} out of range for {} classes".format(box.class_id, num_classes))
        col = int(box.cx // cell)
        row = int(box.cy // cell)
        anchor, _ = best_anchor(BoxSize(box.h, box.w), anchors)
        area = box.w * box.h
        if mask[anchor, row, col]:
            collisions += 1
            logger.warning("Boxes collide at cell (%d, %d) anchor %d, keeping the larger one", row, col, anchor)
            if area <= areas[anchor, row, col]:
                continue
        entry = np.zeros(5 + num_classes)
        entry[0] = 1.0
        entry[1] = box.cx / cell - col
        entry[2] = box.cy / cell - row
        entry[3] = math.log(box.w / sizes[anchor, 1])
        entry[4] = math.log(box.h / sizes[anchor, 0])
        entry[5 + box.class_id] = 1.0
        tensor[anchor, :, row, col] = entry
        mask[anchor, row, col] = True
        areas[anchor, row, col] = area
    return TargetGrid(tensor, mask, collisions)


def ideal_raw(target):
    """
    Raw head output that decodes exactly to the boxes of target, with saturated objectness and class logits.
    """
    tensor = target.tensor
    raw = np.zeros_like(tensor)
    mask = target.mask
    raw[:, 0] = np.where(mask, logit(1.0), logit(0.0))
    raw[:, 1] = np.where(mask, logit(tensor[:, 1]), 0.0)
    raw[:, 2] = np.where(mask, logit(tensor[:, 2]), 0.0)
    raw[:, 3] = np.where(mask, tensor[:, 3], 0.0)
    raw[:, 4] = np.where(mask, tensor[:, 4], 0.0)
    onehot = np.clip(tensor[:, 5:], SATURATION_EPS, 1.0)
    raw[:, 5:] = np.where(mask[:, None], np.log(onehot), 0.0)
    a, channels, s, _ = tensor.shape
    return raw.reshape(a * channels, s, s)


def _split_raw(raw, num_anchors, num_classes):
    channels = (num_classes + 5) * num_anchors
    if raw.ndim != 3 or raw.shape[0] != channels or raw.shape[1] != raw.shape[2]:
        raise ShapeError("Raw head output must have shape ({}, S, S) for C={} and A={}, got {}".format(
            channels, num_classes, num_anchors, raw.shape))
    return raw.reshape(num_anchors, num_classes + 5, raw.shape[1], raw.shape[2])


def decode_predictions(raw, anchors, image_size, conf_threshold=0.5, num_classes=1):
    """
    Turn raw head output into Detections in network input pixels, keeping those scoring at least conf_threshold.
    Detections are ordered by anchor, then row, then column.
    """
    anchors = _anchor_set(anchors)
    grid = _split_raw(raw, len(anchors), num_classes)
    s = grid.shape[2]
    cell = image_size / s
    sizes = anchors.as_array()
    confidence = sigmoid(grid[:, 0])
    cols = np.arange(s)[None, None, :]
    rows = np.arange(s)[None, :, None]
    cx = (cols + sigmoid(grid[:, 1])) * cell
    cy = (rows + sigmoid(grid[:, 2])) * cell
    w = sizes[:, 1, None, None] * np.exp(grid[:, 3])
    h = sizes[:, 0, None, None] * np.exp(grid[:, 4])
    probs = softmax(grid[:, 5:], axis=1)
    best_class = probs.argmax(axis=1)
    score = confidence * probs.max(axis=1)
    detections = []
    for a, row, col in zip(*np.nonzero(score >= conf_threshold)):
        detections.append(Detection(
            cx=float(cx[a, row, col]),
            cy=float(cy[a, row, col]),
            w=float(w[a, row, col]),
            h=float(h[a, row, col]),
            confidence=float(confidence[a, row, col]),
            class_probs=tuple(float(p) for p in probs[a, :, row, col]),
            class_id=int(best_class[a, row, col]),
            score=float(score[a, row, col]),
        ))
    return detections


def nms(detections, iou_threshold=0.5):
    """
    Greedy suppression by descending score of detections overlapping a kept detection of the same class by more than iou_threshold.
    """
    if not 0 < iou_threshold <= 1:
        raise DetectionError("NMS IOU threshold must be in (0, 1], got {}".format(iou_threshold))
    kept = []
    for candidate in sorted(detections, key=lambda d: -d.score):
        box = candidate.corners()
        if all(d.class_id != candidate.class_id or iou(d.corners(), box) <= iou_threshold for d in kept):
            kept.append(candidate)
    return kept


def yolo_loss(raw, target, config=None):
    """
    Composite squared error between raw head output and target.
    Return (loss, grad_raw) with grad_raw shaped like raw.
    """
    config = config or YoloLossConfig()
    grid = _split_raw(raw, target.num_anchors, target.num_classes)
    if grid.shape != target.tensor.shape:
        raise ShapeError("Raw grid {} does not match target grid {}".format(grid.shape, target.tensor.shape))
    truth = target.tensor
    mask = target.mask.astype(np.float64)
    other = 1.0 - mask
    grad = np.zeros_like(grid)

    objectness = sigmoid(grid[:, 0])
    d_objectness = objectness * (1.0 - objectness)
    loss = config.lambda_obj * np.sum(mask * (objectness - 1.0) ** 2)
    loss += config.lambda_noobj * np.sum(other * objectness ** 2)
    grad[:, 0] = (2.0 * config.lambda_obj * mask * (objectness - 1.0)
                  + 2.0 * config.lambda_noobj * other * objectness) * d_objectness

    for channel in (1, 2):
        offset = sigmoid(grid[:, channel])
        error = offset - truth[:, channel]
        loss += config.lambda_coord * np.sum(mask * error ** 2)
        grad[:, channel] = 2.0 * config.lambda_coord * mask * error * offset * (1.0 - offset)
    for channel in (3, 4):
        error = grid[:, channel] - truth[:, channel]
        loss += config.lambda_coord * np.sum(mask * error ** 2)
        grad[:, channel] = 2.0 * config.lambda_coord * mask * error

    probs = softmax(grid[:, 5:], axis=1)
    error = probs - truth[:, 5:]
    loss += config.lambda_class * np.sum(mask[:, None] * error ** 2)
    grad_probs = 2.0 * config.lambda_class * mask[:, None] * error
    inner = np.sum(probs * grad_probs, axis=1, keepdims=True)
    grad[:, 5:] = probs * (grad_probs - inner)

    return float(loss), grad.reshape(raw.shape)


def detect(image, network, conf_threshold=0.5, nms_threshold=0.5):
    """
    Run the full detector on an image or image path.
    Detections are returned in original image pixels, best first.
    """
    head = network.spec.head
    if head is None:
        raise DetectionError("Network {!r} has no detection head".format(network.spec.name))
    anchors = network.config.get("anchors")
    if anchors is None or len(anchors) != head.num_anchors:
        raise DetectionError("Network config does not list the {} anchors of its head".format(head.num_anchors))
    if not isinstance(image, imaging.Image.Image):
        image = imaging.read_image(image)
    input_size = network.spec.input_shape[1]
    boxed, transform = imaging.letterbox(image, input_size)
    batch = imaging.to_network_input(boxed)[None]
    raw = forward_network(network, batch, mode="infer").output[0]
    detections = decode_predictions(raw, anchors, input_size, conf_threshold, head.num_classes)
    restored = []
    for det in nms(detections, nms_threshold):
        cx, cy, w, h = transform.box_to_original(det.cx, det.cy, det.w, det.h)
        restored.append(dataclasses.replace(det, cx=cx, cy=cy, w=w, h=h))
    return restored
