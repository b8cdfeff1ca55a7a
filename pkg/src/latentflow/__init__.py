"""Latent-space advection dynamics between two images."""
