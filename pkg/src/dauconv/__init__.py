"""Convolution filters made of displaced Gaussian aggregation units.

Sub-pixel unit displacements are learnable, the filter's receptive field is
decoupled from its parameter count, and a blur-and-shift execution path keeps
inference cost proportional to the unit count instead of the kernel area.
"""

__version__ = "0.1.0"
