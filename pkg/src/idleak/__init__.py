"""Identity-leakage attacks and evaluation against frequency-domain face template protectors."""

__version__ = "0.1.0"
