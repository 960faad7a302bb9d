"""Self-contained pansharpening engine.

Fuses a high-resolution panchromatic band with a low-resolution
multispectral stack using a small residual CNN trained from scratch, with
one-scene target adaptation, MTF-faithful resolution handling, classical
baselines, and reference / no-reference quality assessment.
"""

__version__ = "0.1.0"

from .raster import MultibandImage, read_raster, write_raster  # noqa: F401
