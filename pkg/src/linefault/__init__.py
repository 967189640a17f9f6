"""Physics-informed line-failure localization on synthetic grid-fault data."""

__version__ = "0.1.0"
