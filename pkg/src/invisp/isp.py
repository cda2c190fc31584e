"""Bayer-side preprocessing: white balance, bilinear demosaicing, gamma, and the RAW container."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
_CHANNEL = {"R": 0, "G": 1, "B": 2}
DEFAULT_GAMMA = 2.2


class IspError(ValueError):
    pass


class MetadataError(IspError):
    pass


@dataclass
class BayerFrame:
    """Single-channel mosaic normalised to [0, 1] plus its capture metadata.

    ``unclamped`` is set by :func:`white_balance` when gains pushed sites
    above 1; it holds the pre-clamp mosaic so the in-memory inverse is exact.
    It is never persisted.
    """

    mosaic: np.ndarray
    pattern: str = "RGGB"
    bit_depth: int = 14
    wb_gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    black_white: tuple[float, float] | None = None
    balanced: bool = False
    unclamped: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.mosaic = np.asarray(self.mosaic, dtype=np.float64)
        self.wb_gains = tuple(float(g) for g in self.wb_gains)
        self.validate()

    def validate(self) -> None:
        if self.pattern not in PATTERNS:
            raise IspError(f"unknown Bayer pattern {self.pattern!r}")
        if self.mosaic.ndim != 2:
            raise IspError(f"mosaic must be 2-D, got shape {self.mosaic.shape}")
        h, w = self.mosaic.shape
        if h % 2 or w % 2:
            raise IspError(f"mosaic extents must be even, got {h}x{w}")
        if len(self.wb_gains) != 3 or min(self.wb_gains) <= 0:
            raise IspError(f"white-balance gains must be three positive numbers, got {self.wb_gains}")
        if self.mosaic.size and (self.mosaic.min() < 0 or self.mosaic.max() > 1):
            raise IspError("mosaic values must lie in [0, 1]")
        if not 1 <= self.bit_depth <= 16:
            raise IspError(f"unsupported bit depth {self.bit_depth}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mosaic.shape


def channel_index_map(pattern: str, height: int, width: int) -> np.ndarray:
    """(H, W) array holding the colour channel (0=R, 1=G, 2=B) of every site."""
    if pattern not in PATTERNS:
        raise IspError(f"unknown Bayer pattern {pattern!r}")
    cell = np.array([[_CHANNEL[pattern[0]], _CHANNEL[pattern[1]]], [_CHANNEL[pattern[2]], _CHANNEL[pattern[3]]]])
    return np.tile(cell, (height // 2 + 1, width // 2 + 1))[:height, :width]


def _gain_map(frame: BayerFrame) -> np.ndarray:
    return np.asarray(frame.wb_gains)[channel_index_map(frame.pattern, *frame.shape)]


def white_balance(frame: BayerFrame) -> BayerFrame:
    if frame.balanced:
        raise IspError("frame is already white-balanced")
    scaled = frame.mosaic * _gain_map(frame)
    clamped = np.clip(scaled, 0.0, 1.0)
    unclamped = scaled if np.any(scaled > 1.0) else None
    return replace(frame, mosaic=clamped, balanced=True, unclamped=unclamped)


def inverse_white_balance(frame: BayerFrame) -> BayerFrame:
    if not frame.balanced:
        raise IspError("frame is not white-balanced")
    source = frame.unclamped if frame.unclamped is not None else frame.mosaic
    return replace(frame, mosaic=np.clip(source / _gain_map(frame), 0.0, 1.0), balanced=False, unclamped=None)


def demosaic_bilinear(frame: BayerFrame) -> Tensor:
    """Bilinear demosaic to a (1, 3, H, W) tensor.

    Missing greens average the four direct neighbours; missing red/blue
    average the two aligned neighbours (at green sites) or the four diagonal
    ones (at the opposite colour). Out-of-frame neighbours are replaced by
    the nearest in-frame sample of the same colour.
    """
    return Tensor(demosaic_array(frame.mosaic, frame.pattern)[None])


def demosaic_array(mosaic: np.ndarray, pattern: str) -> np.ndarray:
    h, w = mosaic.shape
    if h % 2 or w % 2:
        raise IspError(f"mosaic extents must be even, got {h}x{w}")
    # reflect padding keeps the CFA phase, so padded neighbours are same-colour
    # samples from inside the frame
    p = 2
    mp = np.pad(np.asarray(mosaic, dtype=np.float64), p, mode="reflect")
    cmap = channel_index_map(pattern, h + 2 * p, w + 2 * p)
    out = np.empty((3, h, w))
    kern_g = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]]) / 4.0
    kern_rb = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]]) / 4.0
    for c, kern in ((0, kern_rb), (1, kern_g), (2, kern_rb)):
        plane = np.where(cmap == c, mp, 0.0)
        acc = np.zeros((h, w))
        for i in range(3):
            for j in range(3):
                if kern[i, j]:
                    acc += kern[i, j] * plane[p - 1 + i : p - 1 + i + h, p - 1 + j : p - 1 + j + w]
        out[c] = acc
    return out


def remosaic(rgb: Tensor | np.ndarray, pattern: str, **meta) -> BayerFrame:
    """Keep each site's native channel. ``meta`` is forwarded to :class:`BayerFrame`."""
    arr = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise IspError("remosaic expects a single image")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise IspError(f"remosaic expects (1, 3, H, W), got {arr.shape}")
    _, h, w = arr.shape
    cmap = channel_index_map(pattern, h, w)
    mosaic = np.take_along_axis(arr.astype(np.float64), cmap[None], axis=0)[0]
    return BayerFrame(mosaic=np.clip(mosaic, 0.0, 1.0), pattern=pattern, **meta)


def gamma_encode(x, gamma: float = DEFAULT_GAMMA):
    """``x ** (1/gamma)`` for a Tensor (differentiable) or array."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if np.any(data < 0):
        raise IspError("gamma_encode: negative input")
    if isinstance(x, Tensor):
        return ad.power(x, 1.0 / gamma)
    return np.power(data, 1.0 / gamma)


def gamma_decode(y, gamma: float = DEFAULT_GAMMA):
    data = y.data if isinstance(y, Tensor) else np.asarray(y)
    if np.any(data < 0):
        raise IspError("gamma_decode: negative input")
    if isinstance(y, Tensor):
        return ad.power(y, gamma)
    return np.power(data, gamma)


def quantize(x: np.ndarray, bits: int) -> np.ndarray:
    """Map [0, 1] floats to integer codes of the given bit depth (round half to even)."""
    peak = (1 << bits) - 1
    return np.rint(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * peak).astype(np.int64)


def dequantize(codes: np.ndarray, bits: int) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) / ((1 << bits) - 1)


def preprocess(frame: BayerFrame, gamma: float = DEFAULT_GAMMA) -> Tensor:
    """Render-side chain: white balance, demosaic, gamma encode."""
    balanced = frame if frame.balanced else white_balance(frame)
    return gamma_encode(demosaic_bilinear(balanced), gamma)


def postprocess(rgb: Tensor | np.ndarray, like: BayerFrame, gamma: float = DEFAULT_GAMMA) -> BayerFrame:
    """Inverse of :func:`preprocess`: clamp, gamma decode, remosaic, undo white balance."""
    arr = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb)
    linear = gamma_decode(np.clip(arr.astype(np.float64), 0.0, 1.0), gamma)
    balanced = remosaic(
        linear, like.pattern, bit_depth=like.bit_depth, wb_gains=like.wb_gains, black_white=like.black_white
    )
    balanced.balanced = True
    return inverse_white_balance(balanced)


# container -------------------------------------------------------------------


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def read_metadata(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MetadataError(f"missing metadata sidecar {path}")
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise MetadataError(f"{path}: invalid JSON ({e})") from None
    for key in ("pattern", "bit_depth", "wb_gains"):
        if key not in meta:
            raise MetadataError(f"{path}: missing key {key!r}")
    if meta["pattern"] not in PATTERNS:
        raise MetadataError(f"{path}: unknown pattern {meta['pattern']!r}")
    gains = meta["wb_gains"]
    if not isinstance(gains, list) or len(gains) != 3 or min(gains) <= 0:
        raise MetadataError(f"{path}: wb_gains must be three positive numbers")
    return meta


def frame_metadata(frame: BayerFrame) -> dict:
    meta = {"pattern": frame.pattern, "bit_depth": frame.bit_depth, "wb_gains": list(frame.wb_gains)}
    if frame.black_white is not None:
        meta["black_level"], meta["white_level"] = frame.black_white
    return meta


def write_metadata(path: str | Path, frame: BayerFrame) -> None:
    Path(path).write_text(json.dumps(frame_metadata(frame), indent=2) + "\n")


def _parse_pnm_header(data: bytes, magic: bytes) -> tuple[int, int, int, int]:
    tokens: list[bytes] = []
    pos = 0
    token_re = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")
    while len(tokens) < 4:
        m = token_re.match(data, pos)
        if m is None:
            raise IspError("truncated PNM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != magic:
        raise IspError(f"expected {magic.decode()} file, got {tokens[0][:2]!r}")
    width, height, maxval = (int(t) for t in tokens[1:])
    return width, height, maxval, pos + 1


def write_pgm(path: str | Path, codes: np.ndarray, maxval: int) -> None:
    codes = np.asarray(codes)
    h, w = codes.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + codes.astype(dtype).tobytes())


def read_pgm(path: str | Path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    w, h, maxval, pos = _parse_pnm_header(data, b"P5")
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    if len(data) - pos < n:
        raise IspError(f"{path}: truncated PGM payload")
    codes = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return codes.astype(np.int64), maxval


def write_bayer(path: str | Path, frame: BayerFrame) -> None:
    """Write a 16-bit big-endian PGM plus a JSON sidecar next to it."""
    if frame.balanced:
        raise IspError("write the un-white-balanced frame (apply inverse_white_balance first)")
    peak = (1 << frame.bit_depth) - 1
    if frame.black_white is not None:
        black, white = frame.black_white
        codes = np.rint(np.clip(frame.mosaic, 0, 1) * (white - black) + black).astype(np.int64)
        peak = max(peak, int(codes.max(initial=0)))
    else:
        codes = quantize(frame.mosaic, frame.bit_depth)
    write_pgm(path, codes, peak)
    write_metadata(sidecar_path(path), frame)


def read_bayer(path: str | Path, meta_path: str | Path | None = None) -> BayerFrame:
    meta = read_metadata(sidecar_path(path) if meta_path is None else meta_path)
    codes, _ = read_pgm(path)
    bits = int(meta["bit_depth"])
    if "black_level" in meta or "white_level" in meta:
        black = float(meta.get("black_level", 0))
        white = float(meta.get("white_level", (1 << bits) - 1))
        mosaic = np.clip((codes - black) / (white - black), 0.0, 1.0)
        bw = (black, white)
    else:
        if codes.max(initial=0) > (1 << bits) - 1:
            raise IspError(f"{path}: sample exceeds {bits}-bit range")
        mosaic = dequantize(codes, bits)
        bw = None
    return BayerFrame(mosaic, meta["pattern"], bits, tuple(meta["wb_gains"]), bw)


def template_frame(meta: dict, height: int, width: int) -> BayerFrame:
    """An all-zero frame carrying the capture metadata of a sidecar."""
    bits = int(meta["bit_depth"])
    bw = None
    if "black_level" in meta or "white_level" in meta:
        bw = (float(meta.get("black_level", 0)), float(meta.get("white_level", (1 << bits) - 1)))
    return BayerFrame(np.zeros((height, width)), meta["pattern"], bits, tuple(meta["wb_gains"]), bw)
