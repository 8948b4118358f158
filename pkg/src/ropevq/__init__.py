"""RoPE-commutative vector quantization for transformer KV caches."""

from .keyquant import CommutativeKeyQuantizer
from .valquant import AdditiveValueQuantizer

__all__ = ["CommutativeKeyQuantizer", "AdditiveValueQuantizer"]
__version__ = "0.1.0"
