"""Context-driven adaptation: traces, Pareto search, AHP weights and online selection."""
