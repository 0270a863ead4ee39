"""JL-projection differentially private training and f-DP accounting."""

__version__ = "0.1.0"
