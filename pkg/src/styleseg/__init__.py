"""Source-conditioned instance normalization for segmentation under annotation-style shift."""

__version__ = "0.1.0"
