"""Experiment harness: configuration, environment, training, case studies and sweeps."""
