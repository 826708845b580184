"""Test suite for the SLPD toolkit."""
