"""3-D vessel-tree reconstruction from stereo X-ray image pairs."""

__version__ = "0.1.0"
