"""Treatment-response (RANO) classification from longitudinal glioblastoma MRI."""

__version__ = "0.1.0"
