"""Learned iterative synchronization of rotations and rigid motions over view-graphs."""

import importlib

__version__ = "0.1.0"

# Resolved on first access so importing the CLI does not load numpy before
# ``--threads`` has been applied.
_EXPORTS = {
    "Group": "liegroup", "Pose": "liegroup",
    "Edge": "viewgraph", "Label": "viewgraph", "ViewGraph": "viewgraph",
    "Architecture": "network", "NetworkParams": "network", "SyncState": "network",
    "init_params": "network", "synchronize": "network",
}

__all__ = list(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(importlib.import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
