"""Guardian-mediated key management for commodity IoT devices.

The package contains the cryptographic core, a device model, the Guardian,
the vendor back-end, a deterministic network simulator with scripted
adversaries, and a scenario runner with a command-line front end.
"""

__version__ = "0.1.0"
