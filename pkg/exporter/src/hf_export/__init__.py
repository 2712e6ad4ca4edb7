"""Checkpoint and corpus export into the protogap container formats."""


class ExportError(Exception):
    """Conversion cannot proceed: unsupported config, missing tensor, bad input."""


__version__ = "0.1.0"
