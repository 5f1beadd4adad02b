"""
SBR-CNN - desk-scale instance segmentation with looped detection/mask heads
"""

__version__ = "1.0.0"
