"""Ultrasound-tongue-video to speech: adversarially trained mel-vector
generation with objective quality evaluation."""

__version__ = "0.1.0"
