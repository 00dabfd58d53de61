"""avflow: audio/video cross-modal generation with linked flow-matching backbones."""

__version__ = "0.1.0"
