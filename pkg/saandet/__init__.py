"""Few-shot object detection with a self-adaptive attention network"""

__version__ = "0.1.0"
