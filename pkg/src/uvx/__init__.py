"""uvx: voxel-based differentiable inverse rendering on the CPU.

Recovers geometry (a signed distance field), materials (albedo, roughness)
and illumination (a local spherical-Gaussian incident light field) from
posed multi-view images by optimizing explicit voxel grids plus small MLP
decoders through a self-contained reverse-mode autodiff core.
"""

__version__ = "0.1.0"
