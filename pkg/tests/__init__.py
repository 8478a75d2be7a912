"""Tests for learned-spectral-ct."""
