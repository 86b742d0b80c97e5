"""Unified motion-text latent diffusion at desk scale.

One denoiser learns the marginal, conditional, and joint distributions of
paired motion and text latents, so a single checkpoint serves text-to-motion,
motion-to-text, unconditional, joint, and variation generation.
"""

__version__ = "0.1.0"
