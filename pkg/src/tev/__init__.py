"""Tactile contact-event toolkit.

Displacement-field processing, contact-event classifiers, pixel-motion
prediction, and a reactive grasp simulator, all on a small self-contained
float32 autodiff engine.
"""

__version__ = "0.1.0"
