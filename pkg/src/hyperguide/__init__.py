"""Weight-space generative models for zero-shot and few-shot task adaptation."""

__version__ = "0.1.0"
