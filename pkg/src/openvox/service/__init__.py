"""HTTP service exposing map sessions over the core library."""

from .app import create_app

__all__ = ["create_app"]
