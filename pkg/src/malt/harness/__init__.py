"""Datasets, metrics, persistence and experiment plumbing."""
