"""Test package for pygformula-interference."""
