from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tables import BASE_CHROMA, BASE_LUMA, scale_table


@dataclass
class JpegConfig:
    """Quality factor, Fourier term count and the derived quantisation tables.

    Explicit ``luma_table``/``chroma_table`` override the quality-scaled ones.
    """

    quality: int = 90
    fourier_terms: int = 10
    luma_table: np.ndarray | None = field(default=None, repr=False)
    chroma_table: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 1 <= int(self.quality) <= 100:
            raise ValueError(f"quality must be in [1, 100], got {self.quality}")
        if self.fourier_terms < 1:
            raise ValueError("fourier_terms must be >= 1")
        self.quality = int(self.quality)
        if self.luma_table is None:
            self.luma_table = scale_table(BASE_LUMA, self.quality)
        if self.chroma_table is None:
            self.chroma_table = scale_table(BASE_CHROMA, self.quality)
        for name in ("luma_table", "chroma_table"):
            t = np.asarray(getattr(self, name), dtype=np.int64)
            if t.shape != (8, 8):
                raise ValueError(f"{name} must be 8x8, got {t.shape}")
            if t.min() < 1 or t.max() > 255:
                raise ValueError(f"{name} entries must lie in [1, 255]")
            setattr(self, name, t)

    @property
    def K(self) -> int:
        return self.fourier_terms

    def component_tables(self, components: int = 3) -> list[np.ndarray]:
        return [self.luma_table] + [self.chroma_table] * (components - 1)
