"""Debate, self-reflection and single-model protocols for ternary cultural-norm judgments."""

__version__ = "0.1.0"
