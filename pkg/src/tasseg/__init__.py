"""Temporal action segmentation on a numpy autodiff core.

Submodules: ``tensor`` (tape autodiff), ``ase`` (segmenter), ``vfe``
(prompt-supervised feature extractor), ``prc`` (boundary calibration),
``losses``, ``metrics``, ``io``/``synthetic`` (data), ``cli``.
"""

__version__ = "0.1.0"
