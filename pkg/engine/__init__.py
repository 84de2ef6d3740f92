"""Inspection planning engine for indoor structural health monitoring flights."""
