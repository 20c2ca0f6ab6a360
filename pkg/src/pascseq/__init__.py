"""Diagnosis-history sequence models for Long COVID risk, with GradCAM attribution."""

__version__ = "0.1.0"
