"""BlockCNN: block-wise artifact removal and predictive JPEG-style compression."""

from .codec import decode_image, encode_image
from .enhance import enhance_image
from .image import Colorspace, RasterImage, load_ppm, save_ppm
from .model import BlockCNN, ModelConfig, Variant, build_model

__all__ = [
    "BlockCNN",
    "Colorspace",
    "ModelConfig",
    "RasterImage",
    "Variant",
    "build_model",
    "decode_image",
    "encode_image",
    "enhance_image",
    "load_ppm",
    "save_ppm",
]
