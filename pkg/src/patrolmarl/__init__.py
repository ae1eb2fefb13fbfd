"""Energy-aware, fault-tolerant multi-agent patrolling on grid maps."""

__version__ = "0.1.0"
