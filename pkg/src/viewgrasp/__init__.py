"""View-based contact models for learning and transferring dexterous grasps."""

__version__ = "0.1.0"
