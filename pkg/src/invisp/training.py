"""Bidirectional training of the invertible RAW <-> sRGB flow."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import isp
from .autodiff import Tensor
from .flow import FlowModel, save_checkpoint
from .jpeg import JpegConfig, codec_decode, codec_encode, jpeg_simulate
from .metrics import psnr, rgb_ssim

log = logging.getLogger(__name__)

INVERSE_SOURCES = ("prediction", "target")


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError, FloatingPointError):
    """Raised when the loss becomes non-finite; carries the last finite step."""

    def __init__(self, step: int, last_good_step: int, message: str):
        super().__init__(message)
        self.step = step
        self.last_good_step = last_good_step


CONFIG_ALIASES = {"lambda": "lam", "λ": "lam"}


def _parse_value(raw: str, type_name: str):
    if raw.lower() in ("none", "null", ""):
        return None
    if type_name.startswith("bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_name.startswith("int"):
        return int(raw)
    if type_name.startswith("float"):
        return float(raw)
    return raw


@dataclass
class TrainConfig:
    steps: int = 2000
    lam: float = 1.0
    lr: float = 1e-4
    batch: int = 1
    crop: int = 64
    seed: int = 0
    blocks: int = 8
    hidden: int = 32
    conv_init: str = "rotation"
    jpeg_in_loop: bool = True
    jpeg_quality: int = 90
    fourier_terms: int = 10
    # "prediction" inverts sim(f(x)); "target" inverts sim(y)
    inverse_source: str = "prediction"
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")
        if self.crop < 16 or self.crop % 2:
            raise ValueError(f"crop must be an even size >= 16, got {self.crop}")
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ValueError("lam must be a finite non-negative number")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.inverse_source not in INVERSE_SOURCES:
            raise ValueError(f"inverse_source must be one of {INVERSE_SOURCES}")
        if not 1 <= self.jpeg_quality <= 100:
            raise ValueError("jpeg_quality must be in [1, 100]")

    @property
    def jpeg(self) -> JpegConfig | None:
        if not self.jpeg_in_loop:
            return None
        return JpegConfig(quality=self.jpeg_quality, fourier_terms=self.fourier_terms)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        values = {CONFIG_ALIASES.get(k, k): v for k, v in values.items()}
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        """Read a JSON object or ``key = value`` lines (``#`` starts a comment)."""
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            return cls.from_dict(json.loads(text))
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            key = CONFIG_ALIASES.get(key, key)
            if key not in types:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _parse_value(raw, types[key])
        return cls.from_dict(values)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PairedSample:
    """Aligned training pair, both (3, H, W) in [0, 1].

    ``raw`` is the gamma-encoded, white-balanced demosaic of a Bayer frame,
    ``rgb`` the camera-rendered sRGB image.
    """

    raw: np.ndarray
    rgb: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.raw.shape != self.rgb.shape or self.raw.ndim != 3 or self.raw.shape[0] != 3:
            raise ValueError(f"pair shapes differ or are not (3, H, W): {self.raw.shape} vs {self.rgb.shape}")

    @classmethod
    def from_frame(cls, frame: isp.BayerFrame, rgb: np.ndarray) -> "PairedSample":
        raw = isp.gamma_encode(isp.demosaic_array(isp.white_balance(frame).mosaic, frame.pattern))
        rgb = np.asarray(rgb)
        if rgb.dtype == np.uint8:
            rgb = rgb / 255.0
        return cls(raw, rgb)


def l1(a: Tensor, b: Tensor) -> Tensor:
    return ad.mean(ad.abs(ad.sub(a, b)))


def loss_terms(model: FlowModel, x: Tensor, y: Tensor, cfg: TrainConfig) -> tuple[Tensor, Tensor, Tensor]:
    """(total, forward L1, inverse L1) for one batch."""
    y_hat = model.forward(x)
    fwd = l1(y_hat, y)
    jcfg = cfg.jpeg
    if jcfg is None:
        # no compression: invert the target directly
        source = y
    else:
        # a rendered image is clamped before it is encoded, so the loop clamps too
        stored = ad.clip(y_hat, 0.0, 1.0) if cfg.inverse_source == "prediction" else y
        source = jpeg_simulate(stored, jcfg)
    inv = l1(model.inverse(source), x)
    total = ad.add(fwd, ad.scalar_mul(inv, cfg.lam))
    return total, fwd, inv


def bidirectional_loss(model: FlowModel, x: Tensor, y: Tensor, lam: float = 1.0, cfg: TrainConfig | None = None) -> Tensor:
    """``L1(f(x), y) + lam * L1(f^-1(.), x)`` as a scalar tensor."""
    cfg = TrainConfig() if cfg is None else cfg
    if lam != cfg.lam:
        cfg = TrainConfig(**{**cfg.to_dict(), "lam": lam})
    return loss_terms(model, x, y, cfg)[0]


# augmentation -----------------------------------------------------------------


@dataclass(frozen=True)
class Transform:
    top: int
    left: int
    rot: int  # quarter turns
    flip: bool


def draw_transform(rng: np.random.Generator, h: int, w: int, crop: int) -> Transform:
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than image {h}x{w}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    rot = int(rng.integers(0, 4))
    flip = bool(rng.random() < 0.5)
    return Transform(top, left, rot, flip)


def apply_transform(img: np.ndarray, t: Transform, crop: int) -> np.ndarray:
    out = img[:, t.top : t.top + crop, t.left : t.left + crop]
    out = np.rot90(out, t.rot, axes=(1, 2))
    if t.flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment(sample: PairedSample, rng: np.random.Generator, crop: int = 64) -> PairedSample:
    """Random crop, rotation and horizontal flip, applied identically to both images."""
    t = draw_transform(rng, sample.raw.shape[1], sample.raw.shape[2], crop)
    return PairedSample(apply_transform(sample.raw, t, crop), apply_transform(sample.rgb, t, crop))


# training loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: FlowModel
    history: list[dict] = field(default_factory=list)
    last_good_step: int = 0


LOG_COLUMNS = ("step", "forward_l1", "inverse_l1", "total")


def _batch(samples: Sequence[PairedSample], rng: np.random.Generator, cfg: TrainConfig) -> tuple[Tensor, Tensor]:
    idx = rng.integers(0, len(samples), size=cfg.batch)
    pairs = [augment(samples[i], rng, cfg.crop) for i in idx]
    return Tensor(np.stack([p.raw for p in pairs])), Tensor(np.stack([p.rgb for p in pairs]))


def train(
    dataset: Sequence[PairedSample],
    cfg: TrainConfig | None = None,
    model: FlowModel | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train with Adam; deterministic for a fixed config and dataset.

    A non-finite loss or gradient stops training with ``TrainingDiverged``;
    the checkpoint file (if any) still holds the last finite parameters.
    """
    cfg = TrainConfig() if cfg is None else cfg
    if not dataset:
        raise TrainingError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = FlowModel.build(
            block_count=cfg.blocks, hidden=cfg.hidden, conv_init=cfg.conv_init, seed=cfg.seed
        )
    params = model.parameters()
    state = ad.AdamState()
    result = TrainResult(model)
    good = model.state_dict()

    log_file = writer = None
    if cfg.log_path:
        log_file = open(cfg.log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(LOG_COLUMNS)
    try:
        for step in range(1, cfg.steps + 1):
            x, y = _batch(dataset, rng, cfg)
            model.zero_grad()
            try:
                with ad.Tape():
                    total, fwd, inv = loss_terms(model, x, y, cfg)
                    ad.backward(total)
                if not all(np.all(np.isfinite(p.grad)) for p in params):
                    raise ad.NonFiniteError("non-finite gradient")
            except (ad.NonFiniteError, FloatingPointError) as exc:
                model.load_state_dict(good)
                raise TrainingDiverged(step, result.last_good_step, f"step {step}: {exc}") from exc
            ad.adam_step(params, state, cfg.lr)
            if not all(np.all(np.isfinite(p.data)) for p in params):
                model.load_state_dict(good)
                raise TrainingDiverged(step, result.last_good_step, f"step {step}: parameters became non-finite")

            row = {"step": step, "forward_l1": fwd.item(), "inverse_l1": inv.item(), "total": total.item()}
            result.history.append(row)
            result.last_good_step = step
            good = model.state_dict()
            if writer:
                writer.writerow([row[c] for c in LOG_COLUMNS])
            if cfg.checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(model, cfg.checkpoint_path)
            if on_step:
                on_step(row)
            if step % 100 == 0:
                log.info("step %d  fwd %.5f  inv %.5f", step, row["forward_l1"], row["inverse_l1"])
        if cfg.checkpoint_path:
            save_checkpoint(model, cfg.checkpoint_path)
    finally:
        if log_file:
            log_file.close()
    return result


# evaluation -------------------------------------------------------------------


def raw_psnr(x_hat: np.ndarray, x: np.ndarray, space: str = "demosaic", pattern: str = "RGGB") -> float:
    """RAW PSNR on [0, 1].

    ``demosaic`` compares the gamma-encoded 3-channel representation
    directly; ``mosaic`` gamma-decodes both and compares the CFA samples.
    """
    x_hat = np.clip(np.asarray(x_hat, dtype=np.float64), 0.0, 1.0)
    x = np.asarray(x, dtype=np.float64)
    if space == "demosaic":
        return psnr(x_hat, x)
    if space == "mosaic":
        a = isp.remosaic(isp.gamma_decode(x_hat.reshape(x_hat.shape[-3:])), pattern).mosaic
        b = isp.remosaic(isp.gamma_decode(np.clip(x.reshape(x.shape[-3:]), 0, 1)), pattern).mosaic
        return psnr(a, b)
    raise ValueError(f"unknown RAW space {space!r}")


def evaluate(
    model: FlowModel, samples: Sequence[PairedSample], quality: int | None = 90, raw_space: str = "demosaic"
) -> dict:
    """Mean held-out metrics.

    ``rgb_psnr``/``rgb_ssim`` compare the clamped, 8-bit-quantised forward
    output with the target. ``raw_psnr`` inverts the forward output after a
    real encode/decode at ``quality`` (or the 8-bit image when ``quality``
    is None) and compares with the input on [0, 1].
    """
    rgb_p, rgb_s, raw_p = [], [], []
    jcfg = JpegConfig(quality=quality) if quality is not None else None
    for s in samples:
        x = Tensor(s.raw[None])
        y_hat = np.clip(model.forward(x).data.astype(np.float64), 0.0, 1.0)
        y8 = np.rint(y_hat * 255.0) / 255.0
        rgb_p.append(psnr(y8, s.rgb[None]))
        rgb_s.append(rgb_ssim(y8, s.rgb[None]))
        if jcfg is not None:
            stored = codec_decode(codec_encode(y_hat, jcfg))
        else:
            stored = Tensor(y8)
        x_hat = model.inverse(stored).data
        raw_p.append(raw_psnr(x_hat, s.raw[None], raw_space))
    return {
        "rgb_psnr": float(np.mean(rgb_p)),
        "rgb_ssim": float(np.mean(rgb_s)),
        "raw_psnr": float(np.mean(raw_p)),
    }
