"""Per-tensor symmetric int8 quantization and integer-only inference."""

from .intops import INT_OPS, CheckedIntOps, IntOps
from .kernels import (i_erf, i_exp, i_gelu, i_layernorm, i_softmax, i_sqrt,
                      quantize_tensor, requant)
from .qmodel import (FakeQuant, QuantizedModel, calibrate, export, fq_predict, int_forward,
                     int_predict, qat_finetune)

__all__ = ["INT_OPS", "CheckedIntOps", "IntOps", "i_erf", "i_exp", "i_gelu",
           "i_layernorm", "i_softmax", "i_sqrt", "quantize_tensor", "requant", "FakeQuant",
           "QuantizedModel", "calibrate", "export", "fq_predict", "int_forward", "int_predict",
           "qat_finetune"]
