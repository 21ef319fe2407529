"""Tests for tdmix."""
