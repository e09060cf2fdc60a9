"""drivevqa: a desk-scale driving VQA stack — multi-resolution vision encoder,
token routing, prioritized replay, and a small encoder-decoder language model,
all on a from-scratch numpy autodiff core."""

__version__ = "0.1.0"

from .tensor import Tensor, ShapeError, NonFiniteError, no_grad

__all__ = ["Tensor", "ShapeError", "NonFiniteError", "no_grad", "__version__"]
