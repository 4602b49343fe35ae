"""Compressed-sensing reconstruction with self-supervised test-time adaptation.

Subpackages:
    diffcore   tensors, reverse-mode differentiation, primitives, Adam
    operators  masked multi-coil Fourier measurement model
    phantoms   synthetic paired-sample generation
    unet       convolutional encoder-decoder reconstructor
    training   supervised / joint / mixture training loops
    ttt        per-instance test-time training with self-validation
    metrics    SSIM, normalized l1, distribution-shift gap bookkeeping
    subspace   closed-form subspace denoising example
    ksp        binary sample/checkpoint container
    cli        command-line harness
"""

__version__ = "0.1.0"
