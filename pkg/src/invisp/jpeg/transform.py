"""Colour conversion, 8x8 block DCT and block padding shared by the simulator and the codec."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# JFIF full-range BT.601
RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
YCBCR_TO_RGB = np.linalg.inv(RGB_TO_YCBCR)
CHROMA_OFFSET = np.array([0.0, 128.0, 128.0])


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II matrix; rows are basis vectors."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


DCT8 = dct_matrix(8)


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """(C=3, H, W) samples on the 0..255 scale to YCbCr on the same scale."""
    return np.einsum("ij,jhw->ihw", RGB_TO_YCBCR, rgb) + CHROMA_OFFSET[:, None, None]


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    return np.einsum("ij,jhw->ihw", YCBCR_TO_RGB, ycc - CHROMA_OFFSET[:, None, None])


def blockwise(x: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Apply ``mat @ B @ mat.T`` to every 8x8 block of the last two axes (float64)."""
    *lead, h, w = x.shape
    b = np.asarray(x, dtype=np.float64).reshape(*lead, h // 8, 8, w // 8, 8)
    out = np.einsum("uk,...ikjl,vl->...iujv", mat, b, mat, optimize=True)
    return out.reshape(*lead, h, w)


def dct2_blocks(x: np.ndarray) -> np.ndarray:
    return blockwise(x, DCT8)


def idct2_blocks(x: np.ndarray) -> np.ndarray:
    return blockwise(x, DCT8.T)


def padded_extent(n: int, block: int = 8) -> int:
    return -(-n // block) * block


@dataclass
class DctBlockGrid:
    """Per-component planes padded to whole 8x8 blocks plus the original extents.

    ``planes`` has shape (C, Hp, Wp); ``blocks`` exposes it as
    (C, Hp/8, Wp/8, 8, 8).
    """

    planes: np.ndarray
    height: int
    width: int

    @property
    def blocks(self) -> np.ndarray:
        c, hp, wp = self.planes.shape
        return self.planes.reshape(c, hp // 8, 8, wp // 8, 8).transpose(0, 1, 3, 2, 4)


def pad_to_blocks(img: np.ndarray) -> DctBlockGrid:
    """Replicate-pad the right and bottom edges of a (C, H, W) image to multiples of 8."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    _, h, w = img.shape
    hp, wp = padded_extent(h), padded_extent(w)
    planes = np.pad(img, ((0, 0), (0, hp - h), (0, wp - w)), mode="edge")
    return DctBlockGrid(planes, h, w)


def unpad(grid: DctBlockGrid) -> np.ndarray:
    return grid.planes[:, : grid.height, : grid.width]
