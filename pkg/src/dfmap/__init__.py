"""Dataflow mapping of workload graphs onto accelerator systems."""

__version__ = "0.1.0"
