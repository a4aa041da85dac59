"""Knowledge-driven texture classification: preprocessing, expert fusion, training, Grad-CAM."""

__version__ = "0.1.0"
