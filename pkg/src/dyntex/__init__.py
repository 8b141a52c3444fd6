"""Two-stream dynamic texture synthesis engine.

Appearance statistics come from a VGG-19 prefix, dynamics statistics
from a multiscale spacetime-oriented energy network; synthesis matches
both sets of Gram matrices by L-BFGS over the video's pixels.
"""

from .gram import GramMatrix, LossConfig
from .msoe import MsoeWeights
from .synth import SynthesisConfig, SynthesisResult, SynthesisTargets
from .vgg import VggWeights

__version__ = "0.1.0"

__all__ = [
    "GramMatrix",
    "LossConfig",
    "MsoeWeights",
    "SynthesisConfig",
    "SynthesisResult",
    "SynthesisTargets",
    "VggWeights",
    "__version__",
]
