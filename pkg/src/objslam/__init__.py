"""Object-oriented visual SLAM simulator and reconstruction evaluation toolkit."""

__version__ = "0.1.0"
