"""Joint channel + pyramid attention segmentation engine.

A desk-scale encoder-decoder segmentation network built on a minimal
float32 tape-autodiff core, with CutMix/flip augmentation, Dice and HD95
evaluation, a synthetic multi-organ phantom generator, and a CLI harness.
"""

from .tensor import Tape, Tensor, backward, tensor

__all__ = ["Tape", "Tensor", "backward", "tensor"]
__version__ = "0.1.0"
