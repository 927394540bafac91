"""Two-phase I2P traffic detection and exfiltration triage over flow features."""

__version__ = "0.1.0"
