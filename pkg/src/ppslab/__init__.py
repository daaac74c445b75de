"""Developmental reaching and grasping on a peripersonal-space graph."""

__version__ = "0.1.0"
