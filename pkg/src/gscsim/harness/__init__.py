"""Operational shell: data synthesis, config, checkpoints, reporting and the CLI."""
