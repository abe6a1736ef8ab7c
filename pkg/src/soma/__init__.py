"""Auto-labeling of unordered motion-capture point clouds with attention and optimal transport."""

__version__ = "0.1.0"
