"""Monte Carlo parameter gradients of jump-diffusion expectations."""

__version__ = "0.1.0"
