"""Fixed-payload data layer for benchmarks: does no processing."""

from __future__ import annotations

from .base import DataLayer, OpSpec


class DummyLayer(DataLayer):
    kind = "dummy"
    ops = {"Echo": OpSpec("Echo"), "Fetch": OpSpec("Fetch")}

    def __init__(self, data: bytes = b"", response_size: int | None = None):
        self.data = bytes(data)
        self.response_size = len(self.data) if response_size is None else response_size

    def op_Echo(self, ctx, payload: bytes = b""):
        return bytes(payload)

    def op_Fetch(self, ctx, payload: bytes = b""):
        # Returns a response of the configured size; the contents are filler,
        # not the sensitive data.
        return bytes(self.response_size)

    def to_record(self):
        return [self.data, self.response_size]

    @classmethod
    def from_record(cls, rec):
        return cls(rec[0], rec[1])

    @classmethod
    def from_initial(cls, initial):
        if initial is None:
            return cls()
        if isinstance(initial, str):
            initial = initial.encode()
        if isinstance(initial, dict):
            return cls(initial.get("data", b""), initial.get("response_size"))
        return cls(bytes(initial))

    def secret_material(self):
        return [self.data] if self.data else []
