"""forklab: fork-in-the-road reasoning data, pass@k evaluation and first-token interventions."""

__version__ = "0.3.0"
