"""A composable FaaS testbed: balancer trees, workers, and emulated workers."""

__version__ = "0.1.0"
