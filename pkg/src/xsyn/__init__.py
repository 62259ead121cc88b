"""One-stage X-ray security image synthesis: grounded inpainting with
attention-guided annotation refinement and latent background occlusion."""

__version__ = "0.1.0"
