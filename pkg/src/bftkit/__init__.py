"""bftkit: Byzantine fault tolerant replication with a managed trust plane."""

__version__ = "0.1.0"
