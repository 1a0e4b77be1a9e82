"""Dataset construction, experiment orchestration, reporting, and the CLI."""
