"""Hierarchical RL recommender that steers user preference toward long-tail items."""

__version__ = "0.1.0"
