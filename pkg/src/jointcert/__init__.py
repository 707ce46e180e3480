"""Certified-robust training that jointly minimizes an adversarial loss and an
interval-bound (IBP) abstract loss with moment-estimated objective weights."""

__version__ = "0.1.0"
