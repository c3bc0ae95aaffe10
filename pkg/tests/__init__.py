"""Unit test package for pfpn."""
