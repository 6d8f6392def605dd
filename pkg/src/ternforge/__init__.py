"""ternforge: quantization toolkit and integer inference engine for fully
ternary Vision Transformers."""

__version__ = "0.1.0"
