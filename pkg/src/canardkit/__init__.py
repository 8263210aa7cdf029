"""Topological search for periodic and chaotic canards in slow-fast systems."""
