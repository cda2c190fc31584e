"""Reading and writing RGB image files (PNG via OpenCV, JPEG via the built-in codec)."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .jpeg import decode_samples


class ImageIOError(OSError):
    pass


def write_png(path: str | Path, rgb: np.ndarray, bits: int = 8) -> None:
    """Write a (3, H, W) image in [0, 1] as an 8- or 16-bit PNG."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 4:
        rgb = rgb[0]
    if bits not in (8, 16):
        raise ValueError("PNG bit depth must be 8 or 16")
    peak = (1 << bits) - 1
    codes = np.rint(np.clip(rgb, 0.0, 1.0) * peak).astype(np.uint8 if bits == 8 else np.uint16)
    hwc = np.ascontiguousarray(codes.transpose(1, 2, 0)[..., ::-1])
    ok, buf = cv2.imencode(".png", hwc)
    if not ok:
        raise ImageIOError(f"could not encode {path}")
    Path(path).write_bytes(buf.tobytes())


def read_png(path: str | Path) -> np.ndarray:
    data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    img = cv2.imdecode(data, cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ImageIOError(f"{path}: not a readable PNG")
    peak = 65535.0 if img.dtype == np.uint16 else 255.0
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return img[..., 2::-1].transpose(2, 0, 1).astype(np.float64) / peak


def read_image(path: str | Path) -> np.ndarray:
    """(3, H, W) float64 in [0, 1] from a PNG or baseline JPEG file."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".jpg", ".jpeg"):
        samples = decode_samples(path.read_bytes())
        if samples.shape[0] == 1:
            samples = np.repeat(samples, 3, axis=0)
        return samples.astype(np.float64) / 255.0
    if suffix == ".png":
        return read_png(path)
    raise ImageIOError(f"{path}: unsupported image type {suffix!r}")
