"""Untrusted host-side services: network relay, time, block storage, gateway."""

from .block import BLOCK_SIZE, EMPTY, BlockStore, SecureBlocks
from .gateway import DEFAULT_ADDRESS, DEFAULT_NAME, GatewayAccount, PaymentGateway, http_body
from .hub import HostHub, HubChannel
from .network import EchoService, Faults, SimNetwork
from .secure_channel import ClientChannel, ServerCertificate, ServerChannel
from .timeauth import SKEW_SECONDS, FixedClock, SignedTime, TimeAuthority, TimeVerifier

__all__ = [
    "BLOCK_SIZE",
    "DEFAULT_ADDRESS",
    "DEFAULT_NAME",
    "EMPTY",
    "BlockStore",
    "ClientChannel",
    "EchoService",
    "Faults",
    "FixedClock",
    "GatewayAccount",
    "HostHub",
    "HubChannel",
    "PaymentGateway",
    "SKEW_SECONDS",
    "SecureBlocks",
    "ServerCertificate",
    "ServerChannel",
    "SignedTime",
    "SimNetwork",
    "TimeAuthority",
    "TimeVerifier",
    "http_body",
]
