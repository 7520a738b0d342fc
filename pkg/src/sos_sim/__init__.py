"""Discrete-event simulator of post-quantum handshake scheduling in an Open RAN control plane."""

from importlib import resources

__version__ = "0.1.0"


def scenario_path(name: str):
    """Path of a bundled scenario file, e.g. ``scenario_path("urban-macro")``."""
    return resources.files(__package__) / "scenarios" / f"{name}.json"
