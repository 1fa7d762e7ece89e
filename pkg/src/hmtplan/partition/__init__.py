"""Pre-partitioning, device assignment search and redundancy elimination."""
