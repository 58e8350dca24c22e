"""Self-supervised sound localisation with rotating inertial-acoustic arrays."""

__version__ = "0.1.0"
