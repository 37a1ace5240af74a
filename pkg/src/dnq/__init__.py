"""Decompose-and-query question answering engine.

The engine answers a question by depth-first decomposition into
sub-questions, calling retrieval tools under a fixed budget and rolling
back to the parent question whenever a branch stops producing evidence.
"""

__version__ = "0.1.0"

SCHEMA_VERSION = 1
