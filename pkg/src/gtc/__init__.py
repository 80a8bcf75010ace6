"""Power-of-two weight networks trained by joint teacher/student distillation."""
from gtc.estimators import GTCAutoencoder, GTCClassifier
from gtc.layers import build_lenet_small, build_mlp, build_vae, build_vgg16, forward_student, forward_teacher
from gtc.model_io import decode_gtcq, encode_gtcq, load_gtcq, save_gtcq
from gtc.quant import QuantizedLayer, QuantParams, bit_cost, layer_bits, quantize_tensor, quantize_weight
from gtc.shift import OpCounter, export_shift_model, shift_forward, shift_multiply
from gtc.tensor import SeededRng, Tensor
from gtc.train import TrainConfig, avg_bits, pm_quantize, train

__version__ = "0.1.0"

__all__ = [
    "GTCAutoencoder", "GTCClassifier", "OpCounter", "QuantParams", "QuantizedLayer", "SeededRng", "Tensor",
    "TrainConfig", "avg_bits", "bit_cost", "build_lenet_small", "build_mlp", "build_vae", "build_vgg16",
    "decode_gtcq", "encode_gtcq", "export_shift_model", "forward_student", "forward_teacher", "layer_bits",
    "load_gtcq", "pm_quantize", "quantize_tensor", "quantize_weight", "save_gtcq", "shift_forward",
    "shift_multiply", "train",
]
