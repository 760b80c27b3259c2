"""Crowd counting with a density regressor trained on labeled scenes and ranked unlabeled patches."""

__version__ = "0.1.0"
