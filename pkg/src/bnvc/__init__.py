"""bnvc: a desk-scale neural video codec built around multi-reference
butterfly feature fusion, with exact duplication-policy analytics and
rate-distortion evaluation tooling."""

__version__ = "0.1.0"
