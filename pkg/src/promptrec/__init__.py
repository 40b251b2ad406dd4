"""Joint aspect extraction and rating prediction with soft prompts on a small causal LM."""

__version__ = "0.1.0"
