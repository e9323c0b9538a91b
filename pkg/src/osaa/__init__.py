"""Online selective adversarial alignment for distant-domain time-series adaptation."""

__version__ = "0.1.0"
