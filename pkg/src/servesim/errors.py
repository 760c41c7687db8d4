"""Exception types shared across the simulator."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration. `field` is a dotted path into the config tree."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class CacheThrashError(RuntimeError):
    """A cache tier cannot free enough bytes: every candidate is referenced.

    Signals backpressure to the scheduler; `bytes_needed` is what is still
    missing after evicting everything evictable.
    """

    def __init__(self, tier, bytes_needed: int):
        name = getattr(tier, "name", str(tier)).lower()
        super().__init__(f"{name} cache thrash: {bytes_needed} bytes still needed")
        self.tier = tier
        self.bytes_needed = bytes_needed


class BackpressureError(RuntimeError):
    """No worker can admit the request; it stays queued."""

    def __init__(self, request_id):
        super().__init__(f"backpressure: no worker admits request {request_id}")
        self.request_id = request_id


class ResyncRequiredError(RuntimeError):
    """A cache-key delta does not chain onto the recorded worker version."""

    def __init__(self, worker_id, have_version: int, delta_from: int):
        super().__init__(
            f"resync required for worker {worker_id}: "
            f"have version {have_version}, delta starts at {delta_from}"
        )
        self.worker_id = worker_id
        self.have_version = have_version
        self.delta_from = delta_from


class TraceFormatError(ValueError):
    """Malformed trace or fixture file; carries the offending line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no
