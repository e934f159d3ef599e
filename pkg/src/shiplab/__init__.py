"""Toy-scale ViT prompt-tuning lab: VPT baselines and semantic-hierarchical prompts."""

__version__ = "0.1.0"
