"""Sleep-wearable engineering stack.

Wire protocol and headband simulator, real-time acquisition with a
drop-queued-data policy, spectral analysis and staging, recording
synchronization, offline integration, and an HTTP/WebSocket gateway.
"""

__version__ = "0.1.0"
