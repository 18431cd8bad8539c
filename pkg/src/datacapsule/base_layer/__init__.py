"""Generic capsule runtime: hosting, invocation dispatch, sealed state."""

from .capsule import CRASH_POINTS, NONCE_WINDOW, AuditEntry, Capsule, CapsuleServices, SimulatedCrash
from .hosting import DEFAULT_SHARE, check_hosting, host_transfer, seal, split_database, unseal
from .machine import BASE_LAYER_CODE_ID, Machine, create_capsule
from .messages import HostingRequest, Identity, InvocationRequest, Response, SealedCapsule
from .tap import BoundaryTap, TapRecord, leaks

__all__ = [
    "BASE_LAYER_CODE_ID",
    "CRASH_POINTS",
    "DEFAULT_SHARE",
    "NONCE_WINDOW",
    "AuditEntry",
    "BoundaryTap",
    "Capsule",
    "CapsuleServices",
    "HostingRequest",
    "Identity",
    "InvocationRequest",
    "Machine",
    "Response",
    "SealedCapsule",
    "SimulatedCrash",
    "TapRecord",
    "check_hosting",
    "create_capsule",
    "host_transfer",
    "leaks",
    "seal",
    "split_database",
    "unseal",
]
