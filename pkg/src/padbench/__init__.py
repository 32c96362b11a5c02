"""Iris presentation attack detection benchmark toolkit."""
