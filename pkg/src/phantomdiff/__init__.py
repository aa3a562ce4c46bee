"""Desk-scale latent diffusion pipeline on procedural phantom images.

Subpackages cover the full workflow: phantom data generation, a small
convolutional latent codec, noise scheduling with Euler sampling, a
conditional denoising U-Net with low-rank adapters, tiled generation
beyond the trained resolution, progressive upscaling, and an evaluation
suite (Frechet distance, Vendi score, AUROC/F1 augmentation benchmark).

All randomness flows from a single master seed through the derivation in
:mod:`phantomdiff.rng`; reruns with identical configuration are
byte-identical on the same machine.
"""

__version__ = "0.1.0"
