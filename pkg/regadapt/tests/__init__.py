"""Tests for regadapt."""
