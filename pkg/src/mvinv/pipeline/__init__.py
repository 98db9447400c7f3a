"""Experiment orchestration, synthetic data and the command-line interface."""
