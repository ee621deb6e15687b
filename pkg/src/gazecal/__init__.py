"""Appearance-based gaze estimation with person-specific calibration.

The package covers the full pipeline: normalizing eye images into a
virtual camera (``geometry``), storing and synthesizing per-person
sample sets (``dataset``), a small convolutional regressor with manual
backpropagation (``net``), training and evaluation (``train``), paired
calibration experiments (``calibration``) and a command line front end
(``cli``).
"""

__version__ = "0.1.0"
