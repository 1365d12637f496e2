"""Affordance-conditioned diffusion prior over hand articulation, with
occlusion-aware single-view refinement."""

__version__ = "0.1.0"
