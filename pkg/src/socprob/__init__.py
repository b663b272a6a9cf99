"""Pedestrian trajectory prediction over Gaussian probability maps with a ConvLSTM."""

__version__ = "0.1.0"
