"""Multi-object tracking as in-context ID prediction, at desk scale."""

__version__ = "0.1.0"
