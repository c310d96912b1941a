"""Image-conditioned neural field for joint view synthesis and part segmentation."""

__version__ = "0.1.0"
