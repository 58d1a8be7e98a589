"""A miniature training compiler: IR, passes, VM and kernels."""

__version__ = "0.1.0"
