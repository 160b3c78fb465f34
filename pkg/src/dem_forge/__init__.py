"""Floodplain DEM construction from sparse elevation sources."""
