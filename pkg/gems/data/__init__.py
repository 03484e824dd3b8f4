"""File and configuration models."""
