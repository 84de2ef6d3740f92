"""Command-line entry package for the inspection pipeline."""
