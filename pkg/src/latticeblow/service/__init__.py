"""HTTP face of the toolkit; the CLI is a thin client of this app."""

from .app import create_app

__all__ = ["create_app"]
