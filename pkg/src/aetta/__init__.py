"""Label-free accuracy estimation and recovery for test-time-adapted classifiers."""

__version__ = "0.1.0"
