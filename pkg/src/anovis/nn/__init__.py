from .kernels import active_backend
from .layers import Adam, Conv2d, Flatten, GlobalAvgPool, Layer, LayerNorm, LeakyReLU, Linear, Sequential

__all__ = [
    "active_backend",
    "Adam",
    "Conv2d",
    "GlobalAvgPool",
    "Flatten",
    "Layer",
    "LayerNorm",
    "LeakyReLU",
    "Linear",
    "Sequential",
]
