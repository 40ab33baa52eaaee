"""Multiscale statistical U-Net: canonical-form video compression and a
distribution-propagating segmentation network with throughput benchmarks."""

__version__ = "0.1.0"
