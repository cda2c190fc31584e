"""Invertible RAW <-> sRGB rendering with a normalizing flow and a differentiable JPEG stage."""

from .autodiff import Tape, Tensor, backward
from .flow import FlowModel, load_checkpoint, model_forward, model_inverse, save_checkpoint
from .isp import BayerFrame, postprocess, preprocess, read_bayer, write_bayer
from .jpeg import JpegConfig, codec_decode, codec_encode, jpeg_simulate
from .metrics import bmp_size, compression_report, psnr, ssim
from .training import PairedSample, TrainConfig, augment, bidirectional_loss, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BayerFrame",
    "FlowModel",
    "JpegConfig",
    "PairedSample",
    "Tape",
    "Tensor",
    "TrainConfig",
    "augment",
    "backward",
    "bidirectional_loss",
    "bmp_size",
    "codec_decode",
    "codec_encode",
    "compression_report",
    "evaluate",
    "jpeg_simulate",
    "load_checkpoint",
    "model_forward",
    "model_inverse",
    "postprocess",
    "preprocess",
    "psnr",
    "read_bayer",
    "save_checkpoint",
    "ssim",
    "train",
    "write_bayer",
]
