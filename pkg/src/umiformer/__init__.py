"""Multi-view voxel reconstruction with inter-view token rectification and similar-token merging."""

__version__ = "0.1.0"
