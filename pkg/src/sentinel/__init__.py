"""Capsule-network indoor localization with adversarial training against rogue APs."""

__version__ = "0.1.0"
