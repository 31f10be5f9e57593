"""Workbench for evaluating adaptive test-time defenses."""

__version__ = "0.1.0"
