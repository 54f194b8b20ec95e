from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

LAYOUTS = ("mvtec", "mtd", "flat")


@dataclass(frozen=True)
class ExtractorConfig:
    """Extraction settings.

    The backbone is tapped after its second residual stage (stride 8), so
    an image of size image_size yields an (image_size/8)^2 grid of patch
    embeddings; each embedding is 3x3 average-pooled and L2-normalized.
    """

    dataset_root: Path
    layout: str = "mvtec"
    category: str = ""
    image_size: int = 256
    batch_size: int = 8
    pretrained: bool = True
    weights_path: Path | None = None
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}; expected one of {LAYOUTS}")
        if self.image_size % 8 != 0 or self.image_size < 8:
            raise ValueError(f"image_size must be a positive multiple of 8, got {self.image_size}")
        object.__setattr__(self, "dataset_root", Path(self.dataset_root))
        if self.weights_path is not None:
            object.__setattr__(self, "weights_path", Path(self.weights_path))

    @property
    def grid_side(self) -> int:
        return self.image_size // 8
