"""
Tests for the lesionseg package.
"""
