"""Backbone-branches fully convolutional landmark detector in numpy."""

__version__ = "0.1.0"
