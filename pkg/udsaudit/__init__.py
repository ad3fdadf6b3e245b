"""Static reachability audit of Unix domain sockets in extracted Android firmware."""

__version__ = "0.1.0"
