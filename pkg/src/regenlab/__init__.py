"""Diffusion-based watermark removal lab: spread-spectrum watermarks, an
analytic-prior diffusion model, regeneration attacks, and decode theory."""

__version__ = "0.1.0"
