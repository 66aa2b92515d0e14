"""Multilingual end-to-end phoneme recognition with frequency-directional attention.

Everything runs on float64 numpy arrays with a small hand-written autodiff
engine; see the README for the module map.
"""

__version__ = "0.1.0"
