"""Learnable multiscale convolutional front ends for raw-waveform speech recognition."""

__version__ = "0.1.0"
