"""Numerical kernel: primitives, layer modules and gradient checking."""

from . import functional
from .gradcheck import GradCheckReport, grad_check
from .layers import LayerParams

__all__ = ["functional", "grad_check", "GradCheckReport", "LayerParams"]
