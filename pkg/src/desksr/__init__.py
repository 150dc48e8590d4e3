"""Desk-scale latent-diffusion super-resolution.

A small, self-contained x4 SISR stack: a latent autoencoder, a toy
self-distilled feature extractor, a conditioned diffusion model trained
from scratch, and a one-step SR generator built on top of it with
low-rank adapters and score distillation. Everything trains on CPU in
minutes on a folder of small images.
"""

__version__ = "0.1.0"
