"""OT-guided score-based diffusion policies with RL fine-tuning, at desk scale."""

__version__ = "0.1.0"
