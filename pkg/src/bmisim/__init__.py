"""Depth-coded image simulation through monocentric and reference lenses.

Modules
-------
optics     sequential ray trace, paraxial checks, PSF grids
psfmap     field interpolation, rotation and resizing of PSFs; tile cache
formation  occlusion-aware layered rendering and the patch-wise baseline
quality    depth/image metrics, Artifact Score, losses
pipeline   configuration-driven orchestration behind the ``bmisim`` CLI
"""

from bmisim.kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
