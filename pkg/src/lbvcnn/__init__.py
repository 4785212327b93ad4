"""Local binary volume CNNs: fixed ternary 3D filter banks with trainable 1x1x1
mixing, three plane-view subnets and their fusion, LBP-family descriptors, and
the video plumbing to train them."""

from .bank import TernaryFilterBank, generate_bank, load_bank, save_bank
from .layers import LbvBlock, conv3d_reference, ternary_conv3d
from .network import (
    FusedNet,
    NetworkSpec,
    Subnet,
    build_fusion,
    build_subnet,
    count_params,
    load_network,
    save_network,
)
from .tensor import Rng, load_tensor, save_tensor

__version__ = "0.1.0"

__all__ = [
    "TernaryFilterBank", "generate_bank", "load_bank", "save_bank", "LbvBlock",
    "conv3d_reference", "ternary_conv3d", "FusedNet", "NetworkSpec", "Subnet",
    "build_fusion", "build_subnet", "count_params", "load_network", "save_network",
    "Rng", "load_tensor", "save_tensor",
]
