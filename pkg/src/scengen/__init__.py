"""Scenario forecasting for multi-site renewable generation.

Trains an improved Wasserstein GAN (gradient penalty + consistency term)
on windowed generation time series and turns any point forecast into a
set of interval-constrained, realistic scenarios by optimizing over the
generator's latent space.
"""

__version__ = "0.1.0"
