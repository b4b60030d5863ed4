"""Single-stage face detector with multiplicative pyramid fusion and a weak segmentation branch.

Everything runs on numpy: a small reverse-mode autograd (``ffdet.tensor``),
the detector itself, training, multi-scale inference and AP evaluation.
"""

from .config import RunConfig
from .inference import detect, detect_arrays
from .model import Detector, ModelConfig

__version__ = "0.1.0"

__all__ = ["Detector", "ModelConfig", "RunConfig", "detect", "detect_arrays", "__version__"]
