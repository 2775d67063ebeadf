"""Hard-sphere kinetic-theory laboratory."""

__version__ = "0.1.0"
