"""Image-quality and file-size metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor
from .isp import BayerFrame, quantize

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _as_chw(x) -> np.ndarray:
    arr = _as_array(x)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("expected a single image")
        arr = arr[0]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected an image, got shape {arr.shape}")
    return arr


def mse(a, b) -> float:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation over the last two axes
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-2) @ g


def ssim(a, b, peak: float = 1.0, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over all valid Gaussian windows and channels.

    Images smaller than the window use the largest odd window that fits.
    """
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    size = min(window, a.shape[1], a.shape[2])
    size -= 1 - size % 2
    g = gaussian_window(size, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def luma(rgb) -> np.ndarray:
    arr = _as_chw(rgb)
    if arr.shape[0] == 1:
        return arr
    return np.tensordot(LUMA_WEIGHTS, arr, axes=1)[None]


def rgb_ssim(a, b, peak: float = 1.0) -> float:
    """SSIM on the BT.601 luma of two RGB images."""
    return ssim(luma(a), luma(b), peak=peak)


def to_8bit(x) -> np.ndarray:
    """Quantise [0, 1] values to 8-bit codes."""
    return quantize(_as_array(x), 8)


# compression -----------------------------------------------------------------


def bmp_size(height: int, width: int, bit_depth: int):
    """Uncompressed size in bytes: 54-byte header plus H * W * b / 8."""
    if min(height, width, bit_depth) <= 0:
        raise ValueError("height, width and bit depth must be positive")
    bits = height * width * bit_depth
    return 54 + bits // 8 if bits % 8 == 0 else 54 + bits / 8


@dataclass
class CompressionReport:
    B_BMP: float
    B_JPEG: int
    C_ratio: float
    bpp: float
    H: int
    W: int
    b: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def table(self) -> str:
        rows = [
            ("B_BMP (bytes)", f"{self.B_BMP}"),
            ("B_JPEG (bytes)", f"{self.B_JPEG}"),
            ("C_ratio", f"{self.C_ratio:.4f}"),
            ("bpp", f"{self.bpp:.4f}"),
            ("H x W x b", f"{self.H} x {self.W} x {self.b}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def compression_report(frame: BayerFrame | tuple[int, int, int], jpeg_bytes: int) -> CompressionReport:
    """``frame`` is a BayerFrame or an explicit (H, W, bit depth) triple."""
    if isinstance(frame, BayerFrame):
        h, w = frame.shape
        b = frame.bit_depth
    else:
        h, w, b = frame
    if jpeg_bytes <= 0:
        raise ValueError("compressed size must be positive")
    bmp = bmp_size(h, w, b)
    return CompressionReport(
        B_BMP=bmp,
        B_JPEG=int(jpeg_bytes),
        C_ratio=bmp / jpeg_bytes,
        bpp=8.0 * jpeg_bytes / (h * w),
        H=h,
        W=w,
        b=b,
    )


def format_metrics(metrics: dict) -> str:
    width = max((len(k) for k in metrics), default=0)
    lines = []
    for k, v in metrics.items():
        if isinstance(v, float):
            v = "inf" if math.isinf(v) else f"{v:.4f}"
        lines.append(f"{k:<{width}}  {v}")
    return "\n".join(lines)
