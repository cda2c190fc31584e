"""JPEG: a differentiable simulator for training and a real baseline codec for evaluation."""

from .codec import (
    JpegError,
    JpegFormatError,
    UnsupportedJpegError,
    codec_decode,
    codec_encode,
    decode_coefficients,
    decode_components,
    decode_samples,
    encode_samples,
)
from .config import JpegConfig
from .simulator import block_dct, fourier_round, jpeg_simulate
from .tables import BASE_CHROMA, BASE_LUMA, format_table, scale_table
from .transform import DctBlockGrid, dct2_blocks, idct2_blocks, pad_to_blocks, unpad

__all__ = [
    "BASE_CHROMA",
    "BASE_LUMA",
    "DctBlockGrid",
    "JpegConfig",
    "JpegError",
    "JpegFormatError",
    "UnsupportedJpegError",
    "block_dct",
    "codec_decode",
    "codec_encode",
    "dct2_blocks",
    "decode_coefficients",
    "decode_components",
    "decode_samples",
    "encode_samples",
    "format_table",
    "fourier_round",
    "idct2_blocks",
    "jpeg_simulate",
    "pad_to_blocks",
    "scale_table",
    "unpad",
]
