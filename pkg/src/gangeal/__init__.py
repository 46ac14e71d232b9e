"""GAN-supervised joint image alignment toolkit."""

__version__ = "0.1.0"
