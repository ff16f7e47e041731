"""
Detection matching, precision and recall, average precision and classification accuracy, pooled and per group.
"""
import csv
import dataclasses
import logging

from platenet import PlatenetError
from platenet.anchors import iou


logger = logging.getLogger("platenet")

IOU_THRESHOLD = 0.5
POOLED_GROUP = "ALL"


class EvaluationError(PlatenetError): pass

class UndefinedMetricError(EvaluationError): pass


@dataclasses.dataclass
class MatchOutcome:
    """
    flags holds (score, is true positive) for every detection, best score first.
    """
    tp: int
    fp: int
    fn: int
    flags: list


@dataclasses.dataclass(frozen=True)
class PRPoint:
    recall: float
    precision: float
    score_threshold: float


def _by_score(detections):
    # sorted is stable, equal scores keep their input order
    return sorted(detections, key=lambda d: -d.score)


def match_detections(detections, ground_truths, iou_threshold=IOU_THRESHOLD):
    """
    Greedily match detections by descending score, each to the unmatched ground truth it overlaps most.
    A match counts when that IOU is at least iou_threshold.
    """
    gt_boxes = [gt.corners() for gt in ground_truths]
    matched = [False] * len(gt_boxes)
    flags = []
    for det in _by_score(detections):
        box = det.corners()
        best, best_iou = None, -1.0
        for index, gt_box in enumerate(gt_boxes):
            if matched[index]:
                continue
            overlap = iou(box, gt_box)
            if overlap > best_iou:
                best, best_iou = index, overlap
        is_tp = best is not None and best_iou >= iou_threshold
        if is_tp:
            matched[best] = True
        flags.append((det.score, is_tp))
    tp = sum(1 for _, is_tp in flags if is_tp)
    return MatchOutcome(tp=tp, fp=len(flags) - tp, fn=len(gt_boxes) - tp, flags=flags)


def precision(outcome):
    denominator = outcome.tp + outcome.fp
    return outcome.tp / denominator if denominator else 1.0


def recall(outcome):
    denominator = outcome.tp + outcome.fn
    return outcome.tp / denominator if denominator else 1.0


def average_precision(samples, iou_threshold=IOU_THRESHOLD):
    """
    samples is an iterable of (detections, ground truths) per image.
    Return (ap, curve) where curve has one PRPoint per distinct detection score, highest score first.
    The area under the curve is integrated with the trapezoid rule after replacing each precision with the
    maximum precision at equal or higher recall.
    """
    flags = []
    total_gt = 0
    for detections, ground_truths in samples:
        outcome = match_detections(detections, ground_truths, iou_threshold)
        flags.extend(outcome.flags)
        total_gt += len(ground_truths)
    if total_gt == 0:
        raise UndefinedMetricError("AP undefined: there are no ground truth boxes")
    flags.sort(key=lambda flag: -flag[0])
    curve = []
    tp = fp = 0
    for index, (score, is_tp) in enumerate(flags):
        if is_tp:
            tp += 1
        else:
            fp += 1
        if index + 1 == len(flags) or flags[index + 1][0] != score:
            curve.append(PRPoint(tp / total_gt, tp / (tp + fp), score))
    if not curve:
        return 0.0, curve
    envelope = [point.precision for point in curve]
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    ap = 0.0
    previous_recall, previous_precision = 0.0, envelope[0]
    for point, enveloped in zip(curve, envelope):
        ap += (point.recall - previous_recall) * (enveloped + previous_precision) / 2
        previous_recall, previous_precision = point.recall, enveloped
    return min(1.0, max(0.0, ap)), curve


def classification_accuracy(predicted, truth):
    predicted, truth = list(predicted), list(truth)
    if not truth:
        raise EvaluationError("Accuracy of an empty set of predictions is undefined")
    if len(predicted) != len(truth):
        raise EvaluationError("Got {} predictions for {} labels".format(len(predicted), len(truth)))
    return sum(1 for p, t in zip(predicted, truth) if p == t) / len(truth)


def group_of(class_label):
    """Country part of a class label, "IND" for "IND-2line"."""
    return class_label.split("-", 1)[0]


@dataclasses.dataclass
class GroupResult:
    group: str
    num_images: int
    num_ground_truths: int = 0
    ap: float = None
    precision: float = None
    recall: float = None
    accuracy: float = None
    flagged: bool = False


@dataclasses.dataclass
class EvalReport:
    groups: list
    ap: float = None
    precision: float = None
    recall: float = None
    mean_group_ap: float = None
    accuracy: float = None
    curve: list = dataclasses.field(default_factory=list)
    score_threshold: float = 0.5
    iou_threshold: float = IOU_THRESHOLD


def _operating_point(samples, score_threshold, iou_threshold):
    tp = fp = fn = 0
    for detections, ground_truths in samples:
        kept = [d for d in detections if d.score >= score_threshold]
        outcome = match_detections(kept, ground_truths, iou_threshold)
        tp, fp, fn = tp + outcome.tp, fp + outcome.fp, fn + outcome.fn
    outcome = MatchOutcome(tp, fp, fn, [])
    return precision(outcome), recall(outcome)


def per_group_report(detections=None, classifications=None, score_threshold=0.5, iou_threshold=IOU_THRESHOLD):
    """
    Build an EvalReport from results keyed by group label.

    detections maps group to a list of (detections, ground truths) per image.
    classifications maps group to a pair (predicted class ids, true class ids).
    Groups without ground truth boxes are flagged and left out of the mean group AP.
    The pooled AP covers every image and raises UndefinedMetricError when no group has ground truth.
    """
    detections = detections or {}
    classifications = classifications or {}
    if not detections and not classifications:
        raise EvaluationError("Nothing to evaluate")
    groups = []
    for group in sorted(set(detections) | set(classifications)):
        samples = detections.get(group, [])
        result = GroupResult(group, num_images=len(samples), num_ground_truths=sum(len(gts) for _, gts in samples))
        if group in detections:
            if result.num_ground_truths:
                result.ap, _ = average_precision(samples, iou_threshold)
                result.precision, result.recall = _operating_point(samples, score_threshold, iou_threshold)
            else:
                result.flagged = True
                logger.warning("Group %s has no ground truth boxes, its AP is undefined", group)
        if group in classifications:
            predicted, truth = classifications[group]
            result.accuracy = classification_accuracy(predicted, truth)
            result.num_images = max(result.num_images, len(truth))
        groups.append(result)
    report = EvalReport(groups, score_threshold=score_threshold, iou_threshold=iou_threshold)
    if detections:
        pooled = [sample for group in sorted(detections) for sample in detections[group]]
        report.ap, report.curve = average_precision(pooled, iou_threshold)
        report.precision, report.recall = _operating_point(pooled, score_threshold, iou_threshold)
        group_aps = [result.ap for result in groups if result.ap is not None]
        report.mean_group_ap = sum(group_aps) / len(group_aps)
    if classifications:
        predicted = [p for group in sorted(classifications) for p in classifications[group][0]]
        truth = [t for group in sorted(classifications) for t in classifications[group][1]]
        report.accuracy = classification_accuracy(predicted, truth)
    return report


def _fmt(value):
    return "" if value is None else "{:.6f}".format(value)


def write_pr_curve_csv(curve, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["threshold", "recall", "precision"])
        for point in curve:
            writer.writerow([_fmt(point.score_threshold), _fmt(point.recall), _fmt(point.precision)])


def write_report_csv(report, path):
    """
    One row per group and a final pooled row; undefined metrics are left empty.
    """
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        header = ["group", "ap", "precision", "recall"]
        with_accuracy = report.accuracy is not None
        if with_accuracy:
            header.append("accuracy")
        writer.writerow(header)
        rows = [(g.group, g.ap, g.precision, g.recall, g.accuracy) for g in report.groups]
        rows.append((POOLED_GROUP, report.ap, report.precision, report.recall, report.accuracy))
        for group, ap, p, r, accuracy in rows:
            row = [group, _fmt(ap), _fmt(p), _fmt(r)]
            if with_accuracy:
                row.append(_fmt(accuracy))
            writer.writerow(row)
