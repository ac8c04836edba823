"""revoice: adversarial any-to-any voice conversion on raw waveforms.

Pure NumPy + a small compiled kernel core; no external ML framework.
"""

__version__ = "0.1.0"
