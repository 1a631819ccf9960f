"""Planar float images and 8-bit PNG I/O.

Images are stored channel-major (3, H, W) as float64 in the nominal range
[0, 1]. Arrays are frozen after construction, so every operation returns a
new image and instances can be shared freely across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as _PILImage


class PngFormatError(ValueError):
    """The file is a PNG we refuse to load."""


class UnsupportedBitDepthError(PngFormatError):
    """PNG sample depth is not 8 bits."""


class UnsupportedColorTypeError(PngFormatError):
    """PNG color type is not truecolor RGB or grayscale."""


_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

# PNG color types: 0 gray, 2 RGB, 3 palette, 4 gray+alpha, 6 RGBA
_SUPPORTED_COLOR_TYPES = {0, 2}


@dataclass(frozen=True, eq=False)
class Image:
    """A 3-channel planar float image, immutable after construction."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) data, got shape {arr.shape}")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError(f"degenerate image shape {arr.shape}")
        # copy, not ascontiguousarray: freezing a caller's buffer would be a surprise
        arr = np.array(arr, dtype=np.float64, order="C")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def channel(self, c: int) -> np.ndarray:
        """Read-only view of one (H, W) plane."""
        return self.data[c]


def _read_png_header(path: Path) -> tuple[int, int]:
    """Return (bit_depth, color_type) from the IHDR chunk."""
    with open(path, "rb") as fh:
        head = fh.read(26)
    if len(head) < 26 or head[:8] != _PNG_SIGNATURE:
        raise PngFormatError(f"{path}: not a PNG file")
    length, chunk = struct.unpack(">I4s", head[8:16])
    if chunk != b"IHDR" or length < 13:
        raise PngFormatError(f"{path}: malformed PNG header")
    bit_depth, color_type = head[24], head[25]
    return bit_depth, color_type


def load_png(path) -> Image:
    """Load an 8-bit RGB or grayscale PNG, scaling samples by 1/255.

    Grayscale input is expanded to three identical channels. 16-bit files
    and palette/alpha color types are rejected rather than silently
    converted.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image file: {path}")
    bit_depth, color_type = _read_png_header(path)
    if bit_depth != 8:
        raise UnsupportedBitDepthError(
            f"{path}: bit depth {bit_depth} not supported (8-bit only)"
        )
    if color_type not in _SUPPORTED_COLOR_TYPES:
        raise UnsupportedColorTypeError(
            f"{path}: PNG color type {color_type} not supported (RGB or grayscale only)"
        )
    with _PILImage.open(path) as pil:
        arr = np.asarray(pil)
    if arr.ndim == 2:
        arr = np.stack([arr, arr, arr], axis=0)
    else:
        arr = arr.transpose(2, 0, 1)
    return Image(arr.astype(np.float64) / 255.0)


def quantize(values: np.ndarray) -> np.ndarray:
    """Map floats to bytes: floor(clamp(v, 0, 1) * 255 + 0.5)."""
    clamped = np.clip(values, 0.0, 1.0)
    return np.floor(clamped * 255.0 + 0.5).astype(np.uint8)


def save_png(img: Image, path) -> None:
    """Write an image as 8-bit RGB PNG, clamping values to [0, 1] first."""
    if img.channels != 3:
        raise ValueError(f"save_png expects 3 channels, got {img.channels}")
    bytes_hwc = quantize(img.data).transpose(1, 2, 0)
    pil = _PILImage.fromarray(bytes_hwc, mode="RGB")
    pil.save(Path(path), format="PNG")


def crop(img: Image, top: int, left: int, h: int, w: int) -> Image:
    """Copy out the h x w window whose top-left corner is (top, left)."""
    if h < 1 or w < 1:
        raise ValueError(f"crop window must be nonempty, got {h}x{w}")
    if top < 0 or left < 0 or top + h > img.height or left + w > img.width:
        raise ValueError(
            f"crop window ({top},{left},{h},{w}) outside image "
            f"{img.height}x{img.width}"
        )
    return Image(img.data[:, top : top + h, left : left + w].copy())


def clamp01(img: Image) -> Image:
    """Clamp values into [0, 1] (used before metric computation)."""
    return Image(np.clip(img.data, 0.0, 1.0))
