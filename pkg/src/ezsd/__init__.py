"""Zero-shot detection by distilling a vision-language encoder into a two-stage head."""

__version__ = "0.1.0"
