"""Procedural desk-scale dataset rendered through a fixed, known ISP.

Scenes are multi-scale value noise in white-balanced linear space. Each one
is mosaicked into a Bayer frame (divided by the white-balance gains and
quantised to the sensor bit depth); the sRGB target is produced from the
frame's white-balanced bilinear demosaic by colour matrix, tone curve,
gamma and 8-bit quantisation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import isp
from .imageio import read_png, write_png

COLOR_MATRIX = np.array(
    [
        [1.50, -0.35, -0.15],
        [-0.20, 1.40, -0.20],
        [-0.05, -0.45, 1.50],
    ]
)
WB_GAINS = (2.0, 1.0, 1.6)
PATTERN = "RGGB"
BIT_DEPTH = 14
GAMMA = 2.2


def tone_curve(x: np.ndarray) -> np.ndarray:
    """Reinhard ``x / (1 + x)`` rescaled so that 1 maps to 1."""
    return 2.0 * x / (1.0 + x)


def synthetic_isp(linear: np.ndarray) -> np.ndarray:
    """White-balanced linear (3, H, W) -> 8-bit sRGB codes (uint8)."""
    mixed = np.einsum("ij,jhw->ihw", COLOR_MATRIX, linear)
    toned = tone_curve(np.clip(mixed, 0.0, 1.0))
    return isp.quantize(toned ** (1.0 / GAMMA), 8).astype(np.uint8)


def _octave(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    gh, gw = h // cell + 3, w // cell + 3
    grid = rng.standard_normal((gh, gw))
    up = ndimage.zoom(grid, cell, order=3, mode="reflect")
    oy, ox = rng.integers(0, cell, size=2)
    return up[oy : oy + h, ox : ox + w]


def random_scene(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Linear, white-balanced RGB scene (3, H, W) in roughly [0.01, 0.95]."""
    lum = np.zeros((h, w))
    for cell, amp in ((64, 1.0), (32, 0.6), (16, 0.35), (8, 0.2), (4, 0.1)):
        lum += amp * _octave(rng, h, w, cell)
    lum = (lum - lum.mean()) / (lum.std() + 1e-12)
    # log-normal exposure gives a natural skew towards dark tones
    level = np.exp(rng.uniform(-2.0, -0.8) + 0.7 * lum)
    chroma = np.stack([0.18 * _octave(rng, h, w, 32) + 0.08 * _octave(rng, h, w, 8) for _ in range(3)])
    tint = rng.uniform(-0.15, 0.15, size=3)[:, None, None]
    scene = level[None] * np.exp(chroma + tint)
    return np.clip(scene, 0.01, 0.95)


def mosaic_scene(scene: np.ndarray, pattern: str = PATTERN, bit_depth: int = BIT_DEPTH, wb_gains=WB_GAINS) -> isp.BayerFrame:
    _, h, w = scene.shape
    cmap = isp.channel_index_map(pattern, h, w)
    sensor = np.take_along_axis(scene, cmap[None], axis=0)[0] / np.asarray(wb_gains)[cmap]
    codes = isp.quantize(sensor, bit_depth)
    return isp.BayerFrame(isp.dequantize(codes, bit_depth), pattern, bit_depth, wb_gains)


def isp_input_linear(frame: isp.BayerFrame) -> np.ndarray:
    """White-balanced bilinear demosaic of a frame, (3, H, W) float64."""
    balanced = isp.white_balance(frame)
    return isp.demosaic_array(balanced.mosaic, balanced.pattern)


@dataclass
class SyntheticImage:
    frame: isp.BayerFrame
    linear: np.ndarray  # ISP input: white-balanced demosaic
    target: np.ndarray  # uint8 (3, H, W)


def generate(count: int, size: int, seed: int = 0) -> list[SyntheticImage]:
    if size % 2 or size < 2:
        raise ValueError(f"size must be even, got {size}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        frame = mosaic_scene(random_scene(rng, size, size))
        linear = isp_input_linear(frame)
        out.append(SyntheticImage(frame, linear, synthetic_isp(linear)))
    return out


def write_dataset(images: list[SyntheticImage], out_dir: str | Path, seed: int | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, item in enumerate(images):
        stem = f"{i:04d}"
        isp.write_bayer(out / f"{stem}.pgm", item.frame)
        write_png(out / f"{stem}_target.png", item.target.astype(np.float64) / 255.0, bits=8)
        np.save(out / f"{stem}_linear.npy", item.linear)
        names.append(stem)
    manifest = {
        "count": len(images),
        "seed": seed,
        "color_matrix": COLOR_MATRIX.tolist(),
        "tone_curve": "2x/(1+x)",
        "gamma": GAMMA,
        "items": names,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def synth_data(count: int, size: int, seed: int, out_dir: str | Path) -> list[SyntheticImage]:
    images = generate(count, size, seed)
    write_dataset(images, out_dir, seed)
    return images


def read_dataset(root: str | Path) -> list[SyntheticImage]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{root}: no manifest.json (not a synth-data directory)")
    items = json.loads(manifest_path.read_text())["items"]
    out = []
    for stem in items:
        frame = isp.read_bayer(root / f"{stem}.pgm")
        target = np.rint(read_png(root / f"{stem}_target.png") * 255).astype(np.uint8)
        linear = np.load(root / f"{stem}_linear.npy")
        out.append(SyntheticImage(frame, linear, target))
    return out
