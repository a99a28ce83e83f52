"""
Tests for the nsp package
"""
