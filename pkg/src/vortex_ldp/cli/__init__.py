"""Command-line interface: ``vortex-ldp <subcommand> --config run.json``."""

from .config import RunConfig, json_schema
from .main import main

__all__ = ["RunConfig", "json_schema", "main"]
