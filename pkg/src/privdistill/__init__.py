"""Membership-privacy benchmark for paired image-translation models.

Trains conditional-GAN translators, attacks them with the reconstruction-loss
membership test, defends them with output noise, DP-SGD, or teacher-student
distillation, and reports the utility-privacy tradeoff.
"""

__version__ = "0.1.0"

from .rng import RngState, mix64  # noqa: F401
