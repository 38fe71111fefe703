"""Preference-aligned tabular data synthesis."""
