"""
Image IO and preprocessing with Pillow.
"""
import dataclasses

import numpy as np
from PIL import Image

from platenet import PlatenetError


PAD_GRAY = (128, 128, 128)


class ImageError(PlatenetError): pass


def read_image(path):
    try:
        with Image.open(path) as image:
            return image.convert("RGB")
    except OSError as e:
        raise ImageError("Unable to read image {}: {}".format(path, e)) from e


def image_size(path):
    """Return (width, height) from the image header without decoding pixels."""
    try:
        with Image.open(path) as image:
            return image.size
    except OSError as e:
        raise ImageError("Unable to read image {}: {}".format(path, e)) from e


def write_ppm(image, path):
    """Write image as binary PPM (P6)."""
    image.convert("RGB").save(path, format="PPM")


@dataclasses.dataclass(frozen=True)
class LetterboxTransform:
    scale_x: float
    scale_y: float
    pad_x: int
    pad_y: int

    def box_to_original(self, cx, cy, w, h):
        return ((cx - self.pad_x) / self.scale_x, (cy - self.pad_y) / self.scale_y, w / self.scale_x, h / self.scale_y)

    def box_to_letterbox(self, cx, cy, w, h):
        return (cx * self.scale_x + self.pad_x, cy * self.scale_y + self.pad_y, w * self.scale_x, h * self.scale_y)


def letterbox(image, target_size):
    """
    Scale image to fit a target_size square keeping its aspect ratio, centered on a gray canvas.
    Return (letterboxed image, LetterboxTransform).
    """
    width, height = image.size
    if width < 1 or height < 1:
        raise ImageError("Cannot letterbox a {}x{} image".format(width, height))
    if target_size < 1:
        raise ImageError("Letterbox target size must be positive, got {}".format(target_size))
    scale = min(target_size / width, target_size / height)
    new_w = max(1, min(target_size, int(round(width * scale))))
    new_h = max(1, min(target_size, int(round(height * scale))))
    pad_x = (target_size - new_w) // 2
    pad_y = (target_size - new_h) // 2
    canvas = Image.new("RGB", (target_size, target_size), PAD_GRAY)
    if (new_w, new_h) == (width, height):
        resized = image.convert("RGB")
    else:
        resized = image.convert("RGB").resize((new_w, new_h), Image.Resampling.BILINEAR)
    canvas.paste(resized, (pad_x, pad_y))
    return canvas, LetterboxTransform(new_w / width, new_h / height, pad_x, pad_y)


def to_network_input(image):
    """(3, H, W) float64 array scaled to [0, 1]."""
    return np.asarray(image.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0


def crop(image, x, y, w, h):
    """Crop the (x, y, w, h) box, clipped to the image and at least one pixel wide and high."""
    width, height = image.size
    left = min(max(0, int(round(x))), width - 1)
    top = min(max(0, int(round(y))), height - 1)
    right = max(left + 1, min(width, int(round(x + w))))
    bottom = max(top + 1, min(height, int(round(y + h))))
    return image.crop((left, top, right, bottom))
