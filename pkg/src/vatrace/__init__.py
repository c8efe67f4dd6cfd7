"""Vision-action instruction records from robot episodes, plus closed-loop evaluation."""

__version__ = "0.1.0"
