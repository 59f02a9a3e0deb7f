"""Four-channel NIR/R/G/B imagery with validity masks."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from gvifusion.diffcore import Tensor4

CHANNELS = ("NIR", "R", "G", "B")
NIR, R, G, B = range(4)


class RasterError(ValueError):
    """Raised for unreadable, mis-shaped or inconsistent image inputs."""


@dataclass(frozen=True)
class NrgbImage:
    """Planes are stacked as ``(4, height, width)`` in NIR, R, G, B order."""

    planes: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        planes = np.asarray(self.planes, dtype=np.float64)
        if planes.ndim != 3 or planes.shape[0] != 4:
            raise RasterError(f"expected planes of shape (4, H, W), got {planes.shape}")
        mask = np.asarray(self.valid_mask, dtype=bool)
        if mask.shape != planes.shape[1:]:
            raise RasterError(
                f"mask shape {mask.shape} does not match planes {planes.shape[1:]}"
            )
        if not np.all(np.isfinite(planes)):
            raise RasterError("planes contain non-finite values")
        if planes.min() < 0.0 or planes.max() > 1.0:
            raise RasterError("plane values must lie in [0, 1]")
        object.__setattr__(self, "planes", planes)
        object.__setattr__(self, "valid_mask", mask)

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    @property
    def nir(self) -> np.ndarray:
        return self.planes[NIR]

    @property
    def red(self) -> np.ndarray:
        return self.planes[R]

    @property
    def green(self) -> np.ndarray:
        return self.planes[G]

    @property
    def blue(self) -> np.ndarray:
        return self.planes[B]

    @classmethod
    def from_planes(cls, nir, red, green, blue, valid_mask=None) -> "NrgbImage":
        planes = np.stack([np.asarray(p, dtype=np.float64) for p in (nir, red, green, blue)])
        if valid_mask is None:
            valid_mask = np.ones(planes.shape[1:], dtype=bool)
        return cls(planes, valid_mask)


def _read_8bit(path, channels: int, what: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (FileNotFoundError, IsADirectoryError) as exc:
        raise RasterError(f"{what} file not found: {path}") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise RasterError(f"cannot read {what} file {path}: {exc}") from exc

    if arr.dtype != np.uint8:
        raise RasterError(f"{what} file {path} is not 8-bit (mode {mode})")
    got = 1 if arr.ndim == 2 else arr.shape[2]
    if got != channels:
        raise RasterError(f"{what} file {path} has {got} channels, expected {channels}")
    return arr


def load_image(rgb_path, nir_path, mask_path=None) -> NrgbImage:
    """Read an RGB triple and a NIR plane (plus optional mask) into an NrgbImage.

    Intensities are scaled by 1/255. A mask pixel is valid when nonzero; with no
    mask every pixel is valid.
    """
    rgb = _read_8bit(rgb_path, 3, "rgb")
    nir = _read_8bit(nir_path, 1, "nir")
    if rgb.shape[:2] != nir.shape:
        raise RasterError(
            f"dimension mismatch: rgb {rgb.shape[1]}x{rgb.shape[0]} "
            f"vs nir {nir.shape[1]}x{nir.shape[0]}"
        )
    if mask_path is not None:
        mask = _read_8bit(mask_path, 1, "mask")
        if mask.shape != nir.shape:
            raise RasterError(
                f"dimension mismatch: mask {mask.shape[1]}x{mask.shape[0]} "
                f"vs nir {nir.shape[1]}x{nir.shape[0]}"
            )
        valid = mask != 0
    else:
        valid = np.ones(nir.shape, dtype=bool)

    planes = np.empty((4,) + nir.shape, dtype=np.float64)
    planes[NIR] = nir / 255.0
    planes[R] = rgb[..., 0] / 255.0
    planes[G] = rgb[..., 1] / 255.0
    planes[B] = rgb[..., 2] / 255.0
    return NrgbImage(planes, valid)


def save_image(image: NrgbImage, rgb_path, nir_path, mask_path=None) -> None:
    """Quantize to 8 bits and write the three-file layout read by load_image."""
    q = np.rint(image.planes * 255.0).astype(np.uint8)
    Image.fromarray(np.stack([q[R], q[G], q[B]], axis=-1), mode="RGB").save(rgb_path)
    Image.fromarray(q[NIR], mode="L").save(nir_path)
    if mask_path is not None:
        Image.fromarray(image.valid_mask.astype(np.uint8) * 255, mode="L").save(mask_path)


def to_tensor(image: NrgbImage) -> Tensor4:
    return Tensor4(image.planes[np.newaxis].copy())


def stack_tensor(images) -> Tensor4:
    """Batch several same-sized images into one ``[N, 4, H, W]`` tensor."""
    images = list(images)
    shapes = {im.planes.shape for im in images}
    if len(shapes) != 1:
        raise RasterError(f"cannot stack images of differing shapes {sorted(shapes)}")
    return Tensor4(np.stack([im.planes for im in images]))


def planes_from_tensor(t: Tensor4, index: int = 0) -> np.ndarray:
    if t.shape[1] < 4:
        raise RasterError(f"tensor has {t.shape[1]} channels, need at least 4")
    return t.values[index, :4].copy()
