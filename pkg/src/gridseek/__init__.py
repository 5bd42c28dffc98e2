"""Contrastive crop-to-image localization and search on a small numpy autodiff core."""

__version__ = "0.1.0"
