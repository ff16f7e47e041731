"""
Convert evaluation results into JSON serializable dicts conforming to the JSON schemas in the platenet_format package.
"""
import warnings

from platenet_format import schemabuilder


# Ignore UserWarning (JSON schema warnings)
warnings.filterwarnings("ignore", category=UserWarning)


def _optional(data, key, value):
    if value is not None:
        data[key] = value


def group_result_as_dict(result):
    data = {
        "group": result.group,
        "numImages": result.num_images,
        "numGroundTruths": result.num_ground_truths,
    }
    _optional(data, "ap", result.ap)
    _optional(data, "precision", result.precision)
    _optional(data, "recall", result.recall)
    _optional(data, "accuracy", result.accuracy)
    if result.flagged:
        data["flagged"] = True
    return data


def report_as_dict(report, mode, split, warning_messages=()):
    """
    Return a JSON serializable dict of an "Eval report" object, leaving out undefined metrics.
    """
    data = {
        "mode": mode,
        "split": split,
        "groups": [group_result_as_dict(result) for result in report.groups],
    }
    _optional(data, "ap", report.ap)
    _optional(data, "meanGroupAp", report.mean_group_ap)
    _optional(data, "precision", report.precision)
    _optional(data, "recall", report.recall)
    _optional(data, "accuracy", report.accuracy)
    if mode == "detector":
        data["scoreThreshold"] = report.score_threshold
        data["iouThreshold"] = report.iou_threshold
        data["prCurve"] = [
            {"threshold": point.score_threshold, "recall": point.recall, "precision": point.precision}
            for point in report.curve
        ]
    if warning_messages:
        data["warningMessages"] = list(warning_messages)
    return data


def full_serialize(report_data):
    """
    Serialize report_data as an "Eval report" JSON schema object and return the resulting JSON string.
    """
    return schemabuilder.serialize_report(report_data)
