"""Range queries over a learned spatial index of Paillier-encrypted points."""

__version__ = "0.1.0"
