"""Depth/normal geometry toolkit."""
