"""Direct sparse visual SLAM with a persistent map and photometric bundle adjustment."""

__version__ = "0.1.0"
