"""Desk-scale visual relationship detection with phrase-guided message passing."""

__version__ = "0.1.0"
