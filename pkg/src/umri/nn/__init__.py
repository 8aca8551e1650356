"""Neural building blocks on top of PyTorch autograd."""
from .layers import (DepthwiseSeparableConv, InstanceNorm2d, LayerNorm, bilinear_resize,
                     channels_to_complex, complex_to_channels, conv2d, depthwise_separable_conv,
                     instance_norm, layer_norm)
from .unet import NormUNet, UNet
from .vit import PRESETS, VisionTransformer, VitConfig, preset, tokens_to_map, vit_encode
from .weights import (ModelWeights, adam_step, backward, import_encoder, load_weights,
                      save_weights, sgd_adam_step)

__all__ = [
    "DepthwiseSeparableConv", "InstanceNorm2d", "LayerNorm", "ModelWeights", "NormUNet",
    "PRESETS", "UNet", "VisionTransformer", "VitConfig", "adam_step", "backward",
    "bilinear_resize", "channels_to_complex", "complex_to_channels", "conv2d",
    "depthwise_separable_conv", "import_encoder", "instance_norm", "layer_norm",
    "load_weights", "preset", "save_weights", "sgd_adam_step", "tokens_to_map", "vit_encode",
]
