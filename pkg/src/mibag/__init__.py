"""Multiple-instance clustering of bags of patch embeddings."""

__version__ = "0.1.0"

from .bagstore import Bag, Dataset, MaskSet, load_dataset, save_dataset
from .distances import DistanceMatrix, HausdorffVariant
from .weights import WeightConfig, WeightVector

__all__ = [
    "Bag",
    "Dataset",
    "MaskSet",
    "DistanceMatrix",
    "HausdorffVariant",
    "WeightConfig",
    "WeightVector",
    "load_dataset",
    "save_dataset",
    "__version__",
]
