"""Image-to-LiDAR knowledge transfer at desk scale.

Submodules: autodiff, geometry, datasets, labelgen, nets, peft, distill,
metrics and cli. Hot loops live in kernels, compiled with numba unless
``ELITE_DISABLE_NUMBA=1``.
"""

__version__ = "0.1.0"
