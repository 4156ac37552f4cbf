"""Experiment orchestration: config, seeding, runs, reports, CLI."""
