"""Edge-masked adversarial protection against diffusion personalization, at toy scale."""

__version__ = "0.1.0"
