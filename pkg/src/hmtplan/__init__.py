"""Cross-level deployment planner and fleet simulator for DL computation graphs."""

__version__ = "0.1.0"
