"""Region-of-interest VQA toolkit: dataset reconstruction, alpha-blended
box overlays, answer scoring, an evaluation harness, and a numerically
checked feature-fusion projector."""

__version__ = "0.1.0"
