"""Feature-statistics style randomization for domain generalization, on a numpy autodiff core."""

__version__ = "0.1.0"

from . import kernels  # noqa: E402
from .tensor import Tensor, no_grad  # noqa: E402

__all__ = ["Tensor", "no_grad", "kernels", "__version__"]
