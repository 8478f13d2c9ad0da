"""Experiment harness: config, pipelines and the command-line interface."""
