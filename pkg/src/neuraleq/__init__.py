"""Wireline equalization lab: forward-backward MAP detection, FFE/DFE and NeuralEQ."""

__version__ = "0.1.0"
