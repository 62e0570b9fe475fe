"""Micro-expression recognition from onset/apex pairs.

A learned displacement generator feeds AU-region transformer fusion. Everything
runs on the small numpy autodiff kernel in ``mefusion.core``.
"""

__version__ = "0.1.0"
