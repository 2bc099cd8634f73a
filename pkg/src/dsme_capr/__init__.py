"""DSME CAP reduction toolkit: analytic model and discrete-event simulator."""

__version__ = "0.1.0"
