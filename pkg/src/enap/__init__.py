"""Mining probabilistic Mealy machines from demonstrations and controlling with them."""

__version__ = "0.1.0"
