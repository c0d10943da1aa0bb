"""Interaction-aware point clouds, correspondence pretraining, and a diffusion policy."""

from ._alloc import tune_malloc

tune_malloc()

__version__ = "0.1.0"
