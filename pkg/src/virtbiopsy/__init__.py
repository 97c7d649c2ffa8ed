"""Prostate MRI virtual-biopsy pipeline.

Anatomy-guided segmentation, prior-augmented risk classification with
multi-scale ensembling, VAE-GAN counterfactual explanations, and an
in-silico reader-trial harness.
"""

__version__ = "0.1.0"
