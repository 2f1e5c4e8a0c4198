"""Weakly supervised localization with jointly trained classifier and localizer heads."""

__version__ = "0.1.0"
