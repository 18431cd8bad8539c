"""Simulated card payment gateway reachable only through the network.

Request: an HTTP/1.1-style POST whose body is
``amount=<cents>&merchant=<id>&card=<token>``.  Response bodies are
``conf_code=<16 hex>`` or ``error=<reason>``.
"""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass, field
from urllib.parse import parse_qs

from ..crypto import KeyPair, PublicKey
from .secure_channel import ServerCertificate, ServerChannel

DEFAULT_ADDRESS = "gateway.sim:443"
DEFAULT_NAME = "gateway.sim"

_REQUEST = re.compile(rb"^POST (\S+) HTTP/1\.1\r\n(.*?)\r\n\r\n(.*)$", re.S)


@dataclass
class GatewayAccount:
    account_id: str
    balance: int
    log: list[tuple[int, str, str]] = field(default_factory=list)

    @property
    def charged(self) -> int:
        return sum(amount for amount, _, _ in self.log)


def http_response(status: int, reason: str, body: str) -> bytes:
    raw = body.encode()
    return f"HTTP/1.1 {status} {reason}\r\nContent-Length: {len(raw)}\r\n\r\n".encode() + raw


def http_body(response: bytes) -> tuple[int, str]:
    head, _, body = response.partition(b"\r\n\r\n")
    status = int(head.split(b" ", 2)[1])
    return status, body.decode("utf-8", "replace")


class PaymentGateway:
    def __init__(self, merchants=(), name: str = DEFAULT_NAME, key: KeyPair | None = None, seed: int | None = None):
        self.name = name
        self.merchants = set(merchants)
        self.accounts: dict[str, GatewayAccount] = {}
        self.key = key or KeyPair.generate("ed25519")
        self.cert: ServerCertificate | None = None
        self._issued: set[str] = set()
        self._seed = seed if seed is not None else os.urandom(16).hex()
        self._deterministic = seed is not None
        self._serial = 0

    def open_account(self, card_token: str, balance: int) -> GatewayAccount:
        acct = GatewayAccount(card_token, balance)
        self.accounts[card_token] = acct
        return acct

    def install_certificate(self, ca: KeyPair) -> ServerCertificate:
        self.cert = ServerCertificate.issue(ca, self.name, self.key.public)
        return self.cert

    def _conf_code(self) -> str:
        while True:
            self._serial += 1
            code = hashlib.sha256(f"{self._seed}|{self.name}|{self._serial}".encode()).hexdigest()[:16]
            if code not in self._issued:
                self._issued.add(code)
                return code

    def gateway_charge(self, http_post: bytes) -> bytes:
        m = _REQUEST.match(http_post)
        if m is None:
            return http_response(400, "Bad Request", "error=malformed_request")
        try:
            fields = parse_qs(m.group(3).decode(), strict_parsing=True)
            amount = int(fields["amount"][0])
            merchant = fields["merchant"][0]
            card = fields["card"][0]
        except (KeyError, ValueError, UnicodeDecodeError):
            return http_response(400, "Bad Request", "error=malformed_request")
        if amount <= 0:
            return http_response(400, "Bad Request", "error=invalid_amount")
        if self.merchants and merchant not in self.merchants:
            return http_response(400, "Bad Request", "error=unknown_merchant")
        acct = self.accounts.get(card)
        if acct is None:
            return http_response(402, "Payment Required", "error=unknown_card")
        if amount > acct.balance:
            return http_response(402, "Payment Required", "error=insufficient_funds")
        code = self._conf_code()
        acct.balance -= amount
        acct.log.append((amount, merchant, code))
        return http_response(200, "OK", f"conf_code={code}")

    # network service --------------------------------------------------------

    def open(self):
        if self.cert is None:
            raise RuntimeError("gateway certificate not installed")
        counter = [0]

        def rand(n: int) -> bytes:
            if not self._deterministic:
                return os.urandom(n)
            counter[0] += 1
            out = b""
            while len(out) < n:
                out += hashlib.sha256(f"{self._seed}|{self._serial}|{counter[0]}|{len(out)}".encode()).digest()
            return out[:n]

        return ServerChannel(self.name, self.key, self.cert, self.gateway_charge, rand)

    @property
    def public(self) -> PublicKey:
        return self.key.public
