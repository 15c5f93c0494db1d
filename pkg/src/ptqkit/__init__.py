"""Post-training quantization of transformer encoders with Gamma Migration and
Token-Wise Clipping."""
from .calibration import CalibrationResult, CalibrationSet, ClipSearchConfig, calibrate
from .migration import migrate
from .model import ModelGraph, forward, place_quant_nodes
from .quantizer import ClipRange, QuantParams, dequantize, fake_quant, quantize

__all__ = [
    "CalibrationResult",
    "CalibrationSet",
    "ClipRange",
    "ClipSearchConfig",
    "ModelGraph",
    "QuantParams",
    "calibrate",
    "dequantize",
    "fake_quant",
    "forward",
    "migrate",
    "place_quant_nodes",
    "quantize",
]
