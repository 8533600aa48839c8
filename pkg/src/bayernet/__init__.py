"""Keypoint detection and description on raw Bayer images."""
from .bayer import BayerImage, KernelKind, mosaic
from .network import BayerNet, NetworkConfig, load_checkpoint, save_checkpoint

__all__ = ["BayerImage", "BayerNet", "KernelKind", "NetworkConfig", "load_checkpoint", "mosaic", "save_checkpoint"]
__version__ = "0.1.0"
