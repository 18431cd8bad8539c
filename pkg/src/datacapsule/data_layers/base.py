"""Contract between the base layer and a data layer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, ClassVar

from ..errors import DataLayerError


def _zero(args) -> int:
    return 0


@dataclass(frozen=True)
class OpSpec:
    """One interface call.  ``amount`` maps arguments to the number the
    invocation policy constrains (cents for Charge, 1 per query, else 0).
    With ``policy=False`` an authenticated request suffices."""

    name: str
    owner_only: bool = False
    amount: Callable[[list], int] = _zero
    policy: bool = True


@dataclass
class InvocationContext:
    invoker: str
    owner: str
    capsule_id: bytes
    services: Any = None  # CapsuleServices, or None outside a runtime
    extra: dict = field(default_factory=dict)


class DataLayer:
    kind: ClassVar[str] = "abstract"
    ops: ClassVar[dict[str, OpSpec]] = {}

    def call(self, op: str, args: list, ctx: InvocationContext):
        handler = getattr(self, "op_" + op, None)
        if handler is None:
            raise DataLayerError(f"{self.kind} has no operation {op}")
        return handler(ctx, *args)

    # -- persistence --------------------------------------------------------

    def to_record(self):
        raise NotImplementedError

    @classmethod
    def from_record(cls, rec) -> "DataLayer":
        raise NotImplementedError

    @classmethod
    def from_initial(cls, initial) -> "DataLayer":
        """Build from user-supplied initial data (object or file text)."""
        raise NotImplementedError

    # -- transformations ----------------------------------------------------

    def filter(self, criterion) -> "DataLayer":
        raise DataLayerError(f"{self.kind} capsules do not support filtering")

    def contribution(self):
        """Payload this capsule contributes to a data crowd."""
        return self.to_record()

    # -- auditing helpers ---------------------------------------------------

    def secret_material(self) -> list[bytes]:
        """Byte strings that must never cross the boundary in the clear."""
        return []


def require(cond: bool, message: str) -> None:
    if not cond:
        raise DataLayerError(message)
