from .image import Image, Message, check_same_shape
from .imageio import ImageFormatError, decode_bytes, load_image, save_image
from .metrics import mse, psnr, ssim
from .rng import RngStream, as_generator

__all__ = [
    "Image",
    "ImageFormatError",
    "Message",
    "RngStream",
    "as_generator",
    "check_same_shape",
    "decode_bytes",
    "load_image",
    "mse",
    "psnr",
    "save_image",
    "ssim",
]
