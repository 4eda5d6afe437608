"""CPA Lyapunov function and controller synthesis on triangulations."""

__version__ = "0.1.0"
