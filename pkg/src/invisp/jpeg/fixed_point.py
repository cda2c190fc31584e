"""Integer decoder arithmetic of the IJG reference library (libjpeg / libjpeg-turbo).

``idct_islow`` is the accurate integer inverse DCT ("islow", 13-bit
constants, two passes with 2 extra bits of working precision) and
``ycc_to_rgb`` the 16-bit fixed-point colour conversion with per-channel
clamping. Together they make decoded samples bit-identical to what a
standard decoder produces for the same baseline 4:4:4 stream.
"""

from __future__ import annotations

import numpy as np

CONST_BITS = 13
PASS1_BITS = 2

# round(c * 2**13) for the rotation constants of the IJG islow transform
FIX_0_298631336 = 2446
FIX_0_390180644 = 3196
FIX_0_541196100 = 4433
FIX_0_765366865 = 6270
FIX_0_899976223 = 7373
FIX_1_175875602 = 9633
FIX_1_501321110 = 12299
FIX_1_847759065 = 15137
FIX_1_961570560 = 16069
FIX_2_053119869 = 16819
FIX_2_562915447 = 20995
FIX_3_072711026 = 25172


def _descale(x: np.ndarray, n: int) -> np.ndarray:
    # arithmetic right shift with rounding
    return (x + (1 << (n - 1))) >> n


def _idct_1d(v: np.ndarray, shift: int) -> np.ndarray:
    """One islow pass over the last axis (length 8) of an int64 array."""
    # even part
    z2, z3 = v[..., 2], v[..., 6]
    z1 = (z2 + z3) * FIX_0_541196100
    tmp2 = z1 - z3 * FIX_1_847759065
    tmp3 = z1 + z2 * FIX_0_765366865
    z2, z3 = v[..., 0], v[..., 4]
    tmp0 = (z2 + z3) << CONST_BITS
    tmp1 = (z2 - z3) << CONST_BITS
    tmp10, tmp13 = tmp0 + tmp3, tmp0 - tmp3
    tmp11, tmp12 = tmp1 + tmp2, tmp1 - tmp2

    # odd part
    tmp0, tmp1, tmp2, tmp3 = v[..., 7], v[..., 5], v[..., 3], v[..., 1]
    z1, z2 = tmp0 + tmp3, tmp1 + tmp2
    z3, z4 = tmp0 + tmp2, tmp1 + tmp3
    z5 = (z3 + z4) * FIX_1_175875602
    tmp0 = tmp0 * FIX_0_298631336
    tmp1 = tmp1 * FIX_2_053119869
    tmp2 = tmp2 * FIX_3_072711026
    tmp3 = tmp3 * FIX_1_501321110
    z1 = z1 * -FIX_0_899976223
    z2 = z2 * -FIX_2_562915447
    z3 = z3 * -FIX_1_961570560 + z5
    z4 = z4 * -FIX_0_390180644 + z5
    tmp0 = tmp0 + z1 + z3
    tmp1 = tmp1 + z2 + z4
    tmp2 = tmp2 + z2 + z3
    tmp3 = tmp3 + z1 + z4

    out = np.stack(
        [
            tmp10 + tmp3,
            tmp11 + tmp2,
            tmp12 + tmp1,
            tmp13 + tmp0,
            tmp13 - tmp0,
            tmp12 - tmp1,
            tmp11 - tmp2,
            tmp10 - tmp3,
        ],
        axis=-1,
    )
    return _descale(out, shift)


def idct_islow(blocks: np.ndarray) -> np.ndarray:
    """Dequantised coefficient blocks (..., 8, 8), indexed [v, u], to samples in 0..255 (int64)."""
    b = np.asarray(blocks, dtype=np.int64)
    # pass 1 works down the columns and keeps PASS1_BITS of extra precision
    work = np.swapaxes(_idct_1d(np.swapaxes(b, -1, -2), CONST_BITS - PASS1_BITS), -1, -2)
    # pass 2 works along the rows; the extra 3 bits undo the 8x DCT gain
    out = _idct_1d(work, CONST_BITS + PASS1_BITS + 3)
    return np.clip(out + 128, 0, 255)


def _fix16(x: float) -> int:
    return int(x * 65536 + 0.5)


def ycc_to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    """8-bit YCbCr planes to clamped 8-bit RGB, (3, H, W) int64."""
    y, cb, cr = (np.asarray(a, dtype=np.int64) for a in (y, cb, cr))
    half = 1 << 15
    dcb, dcr = cb - 128, cr - 128
    r = y + ((_fix16(1.40200) * dcr + half) >> 16)
    g = y + ((-_fix16(0.34414) * dcb - _fix16(0.71414) * dcr + half) >> 16)
    b = y + ((_fix16(1.77200) * dcb + half) >> 16)
    return np.clip(np.stack([r, g, b]), 0, 255)
