"""Differentiable JPEG approximation: colour transform, block DCT, Fourier-series rounding."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from .config import JpegConfig
from .transform import CHROMA_OFFSET, DCT8, RGB_TO_YCBCR, YCBCR_TO_RGB, blockwise, padded_extent


def fourier_round(x: Tensor, K: int = 10) -> Tensor:
    """Smooth rounding: the sawtooth ``x - round(x)`` replaced by its first K sine terms.

    Exact at integers and half-integers; the gradient is the analytic
    derivative ``1 - 2 * sum_k (-1)^(k+1) cos(2 pi k x)``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    v = x.data.astype(np.float64)
    ks = np.arange(1, K + 1, dtype=np.float64)
    signs = np.where(ks % 2 == 1, 1.0, -1.0)
    out = v.copy()
    for k, sgn in zip(ks, signs):
        out -= sgn / (np.pi * k) * np.sin(2 * np.pi * k * v)

    def rule(g):
        d = np.ones_like(v)
        for k, sgn in zip(ks, signs):
            d -= 2.0 * sgn * np.cos(2 * np.pi * k * v)
        return (g * d,)

    return ad.custom_op("fourier_round", out, (x,), rule)


def block_dct(x: Tensor, inverse: bool = False) -> Tensor:
    """Orthonormal 8x8 DCT-II (or its inverse) over the last two axes.

    The transform is orthogonal, so its adjoint is the opposite transform.
    """
    h, w = x.shape[-2:]
    if h % 8 or w % 8:
        raise ad.ShapeError(f"block_dct needs extents divisible by 8, got {h}x{w}")
    fwd, bwd = (DCT8.T, DCT8) if inverse else (DCT8, DCT8.T)
    out = blockwise(x.data, fwd)
    return ad.custom_op("idct" if inverse else "dct", out, (x,), lambda g: (blockwise(g, bwd),))


Rounding = Callable[[Tensor], Tensor]


def _rounding(kind: str | Rounding, K: int) -> Rounding:
    if callable(kind):
        return kind
    if kind == "fourier":
        return lambda t: fourier_round(t, K)
    if kind == "round":
        return ad.hard_round
    if kind == "identity":
        return lambda t: t
    raise ValueError(f"unknown rounding {kind!r}")


def _colour(x: Tensor, matrix: np.ndarray, bias: np.ndarray) -> Tensor:
    w = Tensor(matrix[:, :, None, None])
    return ad.conv2d(x, w, Tensor(bias), padding=0)


def _table_map(cfg: JpegConfig, n: int, h: int, w: int, reciprocal: bool) -> Tensor:
    planes = []
    for t in cfg.component_tables(3):
        t = t.astype(np.float64)
        planes.append(np.tile(1.0 / t if reciprocal else t, (h // 8, w // 8)))
    return Tensor(np.broadcast_to(np.stack(planes)[None], (n, 3, h, w)))


def jpeg_simulate(rgb: Tensor, cfg: JpegConfig | None = None, rounding: str | Rounding = "fourier") -> Tensor:
    """Differentiable JPEG round trip of an (N, 3, H, W) image in [0, 1].

    ``rounding`` is ``"fourier"`` (default), ``"round"`` (true rounding,
    straight-through gradient) or ``"identity"``. Output is not clamped.
    Internally everything runs in float64 so that true rounding makes the
    same decisions as the codec; the result has the input's dtype.
    """
    cfg = JpegConfig() if cfg is None else cfg
    if rgb.ndim != 4 or rgb.shape[1] != 3:
        raise ad.ShapeError(f"jpeg_simulate expects (N, 3, H, W), got {rgb.shape}")
    quant = _rounding(rounding, cfg.fourier_terms)
    with ad.precision(np.float64):
        out = _simulate64(ad.cast(rgb, np.float64), cfg, quant)
    return ad.cast(out, rgb.dtype)


def _simulate64(rgb: Tensor, cfg: JpegConfig, quant: Rounding) -> Tensor:
    n, _, h, w = rgb.shape
    hp, wp = padded_extent(h), padded_extent(w)

    # level-shifted YCbCr: Y - 128, Cb - 128, Cr - 128
    ycc = _colour(ad.scalar_mul(rgb, 255.0), RGB_TO_YCBCR, CHROMA_OFFSET - 128.0)
    ycc = ad.pad_replicate(ycc, hp - h, wp - w)
    coef = block_dct(ycc)
    q = quant(ad.mul(coef, _table_map(cfg, n, hp, wp, reciprocal=True)))
    coef = ad.mul(q, _table_map(cfg, n, hp, wp, reciprocal=False))
    ycc = block_dct(coef, inverse=True)
    if (hp, wp) != (h, w):
        ycc = ad.crop(ycc, 0, 0, h, w)
    out = _colour(ycc, YCBCR_TO_RGB, YCBCR_TO_RGB @ (128.0 - CHROMA_OFFSET))
    return ad.scalar_mul(out, 1.0 / 255.0)
