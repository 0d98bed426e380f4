from . import functional
from .gradcheck import GradCheckReport, KinkMonitor, grad_check
from .init import generator, seeded_init
from .optim import Adam, adam_step
from .tensor import Tensor

__all__ = ["Tensor", "functional", "seeded_init", "generator", "Adam", "adam_step",
           "grad_check", "GradCheckReport", "KinkMonitor"]
