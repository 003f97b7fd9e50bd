"""Learning-to-optimize toolkit for parametric mixed-integer nonlinear programs."""

__version__ = "0.1.0"
