"""Name-based routing edge: bitfield path forwarding, name resolution,
HTTP request coalescing and the simulation harness around them."""

from __future__ import annotations

__version__ = "0.1.0"
