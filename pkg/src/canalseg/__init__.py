"""Two-stage mandibular canal segmentation on CT-like volumes."""
__version__ = "0.1.0"
