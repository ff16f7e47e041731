"""
Deterministic synthetic plate scenes.

Each scene is a noisy background with zero or more plates of a single style: a filled rectangle with a contrasting
border and one or two rows of bar glyphs. Every scene draws from its own random stream seeded by (seed, scene index),
so scenes can be rendered in any order or in parallel and still come out byte-identical.
"""
import concurrent.futures
import dataclasses
import logging
import math
import os

import numpy as np
from PIL import Image, ImageDraw

from platenet import PlatenetError
from platenet import imaging
from platenet.anchors import BoxSize
from platenet.manifest import Dataset, PlateBox, SampleAnnotation, write_manifest


logger = logging.getLogger("platenet")

SCENE_DIR = "scenes"
MANIFEST_NAME = "manifest.jsonl"


class SynthesisError(PlatenetError): pass


@dataclasses.dataclass(frozen=True)
class PlateStyle:
    name: str
    background: tuple
    border: tuple
    glyph: tuple
    rows: int = 1
    # width / height
    aspect: float = 4.0


DEFAULT_STYLES = (
    PlateStyle("IND-1line", (250, 250, 250), (20, 20, 20), (10, 10, 10), 1, 4.0),
    PlateStyle("IND-2line", (250, 250, 250), (20, 20, 20), (10, 10, 10), 2, 2.0),
    PlateStyle("US-1line", (235, 235, 200), (30, 60, 160), (30, 60, 160), 1, 2.0),
    PlateStyle("US-2line", (235, 235, 200), (30, 60, 160), (30, 60, 160), 2, 2.0),
    PlateStyle("EU-1line", (245, 245, 245), (20, 50, 200), (0, 0, 0), 1, 4.5),
    PlateStyle("EU-2line", (245, 245, 245), (20, 50, 200), (0, 0, 0), 2, 2.0),
    PlateStyle("ARAB-1line", (255, 255, 255), (200, 30, 30), (40, 40, 40), 1, 5.0),
    PlateStyle("ARAB-2line", (255, 255, 255), (200, 30, 30), (40, 40, 40), 2, 2.0),
    PlateStyle("SA-1line", (230, 230, 230), (0, 120, 60), (0, 90, 40), 1, 3.0),
    PlateStyle("TR-1line", (250, 250, 250), (10, 40, 140), (10, 10, 10), 1, 4.5),
    PlateStyle("TR-2line", (250, 220, 40), (10, 10, 10), (10, 10, 10), 2, 2.0),
)
STYLES_BY_NAME = {style.name: style for style in DEFAULT_STYLES}


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    seed: int = 7
    num_scenes: int = 100
    image_size: int = 224
    classes: tuple = tuple(style.name for style in DEFAULT_STYLES)
    size_range: tuple = (10, 670)
    plates_per_scene: tuple = (1, 1)
    test_fraction: float = 0.25
    max_retries: int = 10

    def __post_init__(self):
        if self.num_scenes < 0:
            raise SynthesisError("Number of scenes must be non-negative, got {}".format(self.num_scenes))
        if self.image_size < 1:
            raise SynthesisError("Image size must be positive, got {}".format(self.image_size))
        low, high = self.size_range
        if not 0 < low <= high:
            raise SynthesisError("Invalid plate size range {}".format(self.size_range))
        low, high = self.plates_per_scene
        if not 0 <= low <= high:
            raise SynthesisError("Invalid plates per scene range {}".format(self.plates_per_scene))
        if not 0 <= self.test_fraction <= 1:
            raise SynthesisError("Test fraction must be in [0, 1], got {}".format(self.test_fraction))
        if not self.classes:
            raise SynthesisError("At least one plate class is needed")
        for style in self.styles:
            longer_side_range(self.size_range, style.aspect)

    @property
    def styles(self):
        styles = []
        for entry in self.classes:
            if isinstance(entry, PlateStyle):
                styles.append(entry)
            elif entry in STYLES_BY_NAME:
                styles.append(STYLES_BY_NAME[entry])
            else:
                raise SynthesisError("Unknown plate style {!r}, expected one of {}".format(entry, sorted(STYLES_BY_NAME)))
        return styles


def scene_rng(seed, index):
    return np.random.default_rng([seed, index])


def is_test_scene(index, test_fraction):
    """Every 1/test_fraction-th scene goes to the test split, independently of the scene count."""
    return math.floor((index + 1) * test_fraction) > math.floor(index * test_fraction)


def longer_side_range(size_range, aspect):
    """
    Interval of the longer plate side that keeps both sides of a plate of this aspect within size_range.
    """
    low, high = size_range
    ratio = max(aspect, 1.0 / aspect)
    lower = max(low, low * ratio)
    if lower > high:
        raise SynthesisError("No plate of aspect {} fits the size range {}".format(aspect, size_range))
    return lower, high


def _sample_size(rng, size_range, aspect):
    lower, upper = longer_side_range(size_range, aspect)
    # Clamped so that exp(log(x)) rounding cannot leave the range
    longer = min(upper, max(lower, math.exp(rng.uniform(math.log(lower), math.log(upper)))))
    shorter = max(size_range[0], longer / max(aspect, 1.0 / aspect))
    if aspect >= 1:
        return BoxSize(shorter, longer)
    return BoxSize(longer, shorter)


def sample_box_sizes(rng, count, size_range=(10, 670), aspects=(4.0,)):
    """
    Plate sizes whose longer side is log-uniform over the part of size_range where the shorter side stays at least size_range[0].
    Aspects are width / height ratios, drawn uniformly for each box.
    """
    sizes = []
    for _ in range(count):
        aspect = aspects[int(rng.integers(len(aspects)))]
        sizes.append(_sample_size(rng, size_range, aspect))
    return sizes


def _overlaps(box, placed):
    x, y, w, h = box
    for px, py, pw, ph in placed:
        if x < px + pw and px < x + w and y < py + ph and py < y + h:
            return True
    return False


def _draw_plate(draw, rng, style, x, y, w, h):
    draw.rectangle([x, y, x + w - 1, y + h - 1], fill=style.background)
    border = max(1, int(round(min(w, h) * 0.08)))
    draw.rectangle([x, y, x + w - 1, y + h - 1], outline=style.border, width=border)
    inner_x, inner_y = x + 2 * border, y + 2 * border
    inner_w, inner_h = w - 4 * border, h - 4 * border
    if inner_w < 2 or inner_h < 2 * style.rows:
        return
    row_h = inner_h / style.rows
    glyphs = 7 if style.rows == 1 else 4
    slot = inner_w / glyphs
    for row in range(style.rows):
        top = inner_y + row * row_h + row_h * 0.15
        bottom = inner_y + (row + 1) * row_h - row_h * 0.15
        for glyph in range(glyphs):
            # Bar widths between 30% and 70% of a glyph slot
            bar = slot * rng.uniform(0.3, 0.7)
            left = inner_x + glyph * slot + (slot - bar) / 2
            draw.rectangle([int(left), int(top), max(int(left), int(left + bar) - 1), max(int(top), int(bottom) - 1)], fill=style.glyph)


def render_scene(config, index):
    """
    Return (PIL image, SampleAnnotation) of scene index.
    """
    rng = scene_rng(config.seed, index)
    styles = config.styles
    style = styles[int(rng.integers(len(styles)))]
    size = config.image_size
    base = rng.integers(40, 200)
    noise = rng.integers(-20, 21, size=(size, size, 3))
    image = Image.fromarray(np.clip(base + noise, 0, 255).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(image)
    low, high = config.plates_per_scene
    placed = []
    for plate in range(int(rng.integers(low, high + 1))):
        for _ in range(config.max_retries + 1):
            plate_size = _sample_size(rng, config.size_range, style.aspect)
            w = int(round(plate_size.width))
            h = int(round(plate_size.height))
            if w > size or h > size:
                continue
            x = int(rng.integers(0, size - w + 1))
            y = int(rng.integers(0, size - h + 1))
            if _overlaps((x, y, w, h), placed):
                continue
            _draw_plate(draw, rng, style, x, y, w, h)
            placed.append((x, y, w, h))
            break
        else:
            logger.warning("Scene %d: plate %d did not fit after %d attempts, skipped", index, plate, config.max_retries + 1)
    sample = SampleAnnotation(
        image_ref="{}/{:06d}.ppm".format(SCENE_DIR, index),
        boxes=tuple(PlateBox(*box) for box in placed),
        class_label=style.name,
        split="test" if is_test_scene(index, config.test_fraction) else "train",
    )
    return image, sample


def synthesize(config, out_dir, threads=1):
    """
    Render all scenes of config into out_dir/scenes and write out_dir/manifest.jsonl in scene order.
    Return the Dataset.
    """
    os.makedirs(os.path.join(out_dir, SCENE_DIR), exist_ok=True)

    def render_and_write(index):
        image, sample = render_scene(config, index)
        imaging.write_ppm(image, os.path.join(out_dir, sample.image_ref))
        return sample

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        samples = list(executor.map(render_and_write, range(config.num_scenes)))
    dataset = Dataset([style.name for style in config.styles], samples, out_dir)
    write_manifest(dataset, os.path.join(out_dir, MANIFEST_NAME))
    logger.info("Synthesized %d scenes into %s", len(samples), out_dir)
    return dataset
