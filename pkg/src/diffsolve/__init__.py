"""Denoising-diffusion solvers for TSP and MIS at desk scale."""

__version__ = "0.1.0"
