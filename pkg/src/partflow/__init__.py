"""partflow: part-based 3D shape generation at desk scale.

Composite objects are represented as a fixed-capacity tensor of per-part
latent slots. An image-conditioned gate picks how many slots to use, a bank
of learnable prototypes injects shared part priors, and a small rectified-
flow transformer denoises the active slots, which a point-cloud codec then
decodes into parts.
"""

__version__ = "0.1.0"

from .config import TrainConfig
from .synth import CompositeObject, ConditionImage, GeneratorSpec, PartPointCloud

__all__ = [
    "TrainConfig",
    "GeneratorSpec",
    "CompositeObject",
    "PartPointCloud",
    "ConditionImage",
    "__version__",
]
