"""Test suite for the Conformer-R kit."""
