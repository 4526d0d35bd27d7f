"""Source-free adaptation of a compact grid detector with a mean teacher,
learned target augmentation and student stabilisation."""

from sfdet.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
