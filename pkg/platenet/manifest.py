"""
JSON-lines dataset manifests.

The first line may declare the class list, {"classes": [...]}, every other line is one annotated image:
{"image": "scenes/000123.ppm", "boxes": [{"x": 10, "y": 20, "w": 80, "h": 24}], "class": "IND-1line", "split": "train"}
"""
import dataclasses
import functools
import hashlib
import json
import logging
import os

import jsonschema
import yaml

from platenet import PlatenetError
from platenet import imaging
from platenet.detection import GroundTruthBox


logger = logging.getLogger("platenet")

MANIFEST_LINE_SCHEMA = os.path.join(os.path.dirname(__file__), "schemas", "manifest_line_v1_0.yaml")
SPLITS = ("train", "test")


class ManifestError(PlatenetError): pass


@functools.lru_cache(maxsize=None)
def _line_schema():
    with open(MANIFEST_LINE_SCHEMA, encoding="utf-8") as f:
        return yaml.safe_load(f)


@dataclasses.dataclass(frozen=True)
class PlateBox:
    x: float
    y: float
    w: float
    h: float

    def as_dict(self):
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}

    def to_ground_truth(self, class_id=0):
        return GroundTruthBox.from_corner(self.x, self.y, self.w, self.h, class_id)


@dataclasses.dataclass(frozen=True)
class SampleAnnotation:
    image_ref: str
    boxes: tuple
    class_label: str
    split: str

    def as_dict(self):
        return {
            "image": self.image_ref,
            "boxes": [box.as_dict() for box in self.boxes],
            "class": self.class_label,
            "split": self.split,
        }


@dataclasses.dataclass
class Dataset:
    classes: list
    samples: list
    root: str = "."

    def __len__(self):
        return len(self.samples)

    def split(self, name):
        return [sample for sample in self.samples if sample.split == name]

    def image_path(self, sample):
        return os.path.join(self.root, sample.image_ref)

    def class_index(self, label):
        try:
            return self.classes.index(label)
        except ValueError:
            raise ManifestError("Unknown class {!r}, declared classes are {}".format(label, self.classes))


def _parse_line(line, line_number):
    try:
        data = json.loads(line)
    except json.JSONDecodeError as e:
        raise ManifestError("line {}: malformed JSON: {}".format(line_number, e.msg)) from e
    try:
        jsonschema.validate(data, _line_schema())
    except jsonschema.ValidationError as e:
        raise ManifestError("line {}: invalid manifest entry: {}".format(line_number, e.message)) from e
    return data


def _check_bounds(sample, root, line_number):
    path = os.path.join(root, sample.image_ref)
    try:
        width, height = imaging.image_size(path)
    except imaging.ImageError as e:
        raise ManifestError("line {}: {}".format(line_number, e)) from e
    for box in sample.boxes:
        if box.x + box.w > width or box.y + box.h > height:
            raise ManifestError("line {}: box {} exceeds the {}x{} image {}".format(
                line_number, box.as_dict(), width, height, sample.image_ref))


def load_manifest(path, check_images=True):
    """
    Read and validate a manifest, returning a Dataset.
    Without a header line the class list is the sorted set of labels in the file.
    With check_images, box bounds are checked against the dimensions in each image header.
    """
    root = os.path.dirname(os.path.abspath(path))
    declared = None
    samples = []
    try:
        with open(path, encoding="utf-8") as f:
            lines = list(f)
    except OSError as e:
        raise ManifestError("Unable to read manifest {}: {}".format(path, e)) from e
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        data = _parse_line(line, line_number)
        if "classes" in data:
            if declared is not None or samples:
                raise ManifestError("line {}: the class list header must be the first line".format(line_number))
            declared = list(data["classes"])
            continue
        sample = SampleAnnotation(
            image_ref=data["image"],
            boxes=tuple(PlateBox(b["x"], b["y"], b["w"], b["h"]) for b in data["boxes"]),
            class_label=data["class"],
            split=data["split"],
        )
        if declared is not None and sample.class_label not in declared:
            raise ManifestError("line {}: unknown class {!r}".format(line_number, sample.class_label))
        if check_images:
            _check_bounds(sample, root, line_number)
        samples.append(sample)
    classes = declared if declared is not None else sorted({sample.class_label for sample in samples})
    logger.info("Loaded %d samples over %d classes from %s", len(samples), len(classes), path)
    return Dataset(classes, samples, root)


def write_manifest(dataset, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps({"classes": list(dataset.classes)}) + "\n")
        for sample in dataset.samples:
            f.write(json.dumps(sample.as_dict()) + "\n")


def manifest_hash(path):
    """
    SHA-256 hex digest over the manifest bytes followed by the bytes of every referenced image in manifest order.
    """
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        digest.update(f.read())
    dataset = load_manifest(path, check_images=False)
    for sample in dataset.samples:
        with open(dataset.image_path(sample), "rb") as f:
            digest.update(f.read())
    return digest.hexdigest()
