"""Pilot-wave trajectory simulator for a Mach-Zehnder interferometer."""
