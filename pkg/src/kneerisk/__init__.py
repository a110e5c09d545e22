"""Knee osteoarthritis progression risk from a single radiograph.

A VQ-VAE compresses radiographs into latents, a conditional latent diffusion
model forecasts the 12-month-future latent, and two latent classifiers turn the
current and forecast latents into KL-grade distributions whose comparison
gives the probability of progression.
"""

__version__ = "0.1.0"
