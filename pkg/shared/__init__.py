"""Shared types for tdmix."""
