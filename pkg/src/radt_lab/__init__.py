"""Return-augmented RCSL laboratory on tabular MDPs."""

__version__ = "0.1.0"
