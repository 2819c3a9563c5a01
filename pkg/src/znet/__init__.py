"""Z-net prostate segmentation engine in plain numpy."""

from .model import ParamStore, ZNet, ZNetConfig, param_init, znet_backward, znet_forward
from .volume import Volume

__all__ = ["ParamStore", "Volume", "ZNet", "ZNetConfig", "param_init", "znet_backward", "znet_forward"]
__version__ = "0.1.0"
