"""HTTP service exposing the pipeline jobs."""

from .app import app, create_app

__all__ = ["app", "create_app"]
