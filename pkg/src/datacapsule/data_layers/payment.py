"""Payment capsule: proxies card charges to a pinned gateway."""

from __future__ import annotations

import re
from dataclasses import dataclass

from ..crypto import PublicKey
from ..errors import DataLayerError, FramingError, HubError, SecureChannelError
from ..host_hub.gateway import DEFAULT_ADDRESS, DEFAULT_NAME, http_body
from ..host_hub.secure_channel import ClientChannel
from .base import DataLayer, OpSpec, require

DEFAULT_TEMPLATE = (
    "POST /charge HTTP/1.1\r\nHost: Gateway\r\nContent-Type: application/x-www-form-urlencoded\r\n\r\n"
    "amount=Amount&merchant=MerchantAccount&card=CardNumber"
)
FAILED = -1

_PLACEHOLDER = re.compile(r"Amount|MerchantAccount|CardNumber|Gateway")
_CONF = re.compile(r"conf_code=([0-9a-f]{16})")
_MERCHANT = re.compile(r"[A-Za-z0-9_.\-]{1,64}")


@dataclass(frozen=True)
class PaymentSecret:
    ccn: str
    gateway: str = DEFAULT_ADDRESS
    gateway_ssl_name: str = DEFAULT_NAME
    request_template: str = DEFAULT_TEMPLATE
    ca_public: bytes = b""  # pinned root for the gateway certificate


def build_request(template: str, values: dict[str, str]) -> bytes:
    # One pass, so substituted text is never rescanned for placeholders.
    return _PLACEHOLDER.sub(lambda m: values[m.group(0)], template).encode()


class _Socket:
    def __init__(self, services, fd: int):
        self.services = services
        self.fd = fd

    def send(self, data: bytes) -> None:
        self.services.send(self.fd, data)

    def recv(self) -> bytes:
        return self.services.recv(self.fd)


class PaymentLayer(DataLayer):
    kind = "payment"
    ops = {"Charge": OpSpec("Charge", amount=lambda args: int(args[0]) if args else 0)}

    def __init__(self, secret: PaymentSecret):
        require(bool(secret.ccn), "card token required")
        self.secret = secret

    def charge(self, services, amt: int, merc_acct: str):
        require(isinstance(amt, int) and not isinstance(amt, bool), "amount must be integer cents")
        require(amt > 0, "amount must be positive")
        require(isinstance(merc_acct, str) and _MERCHANT.fullmatch(merc_acct) is not None, "bad merchant account")
        request = build_request(
            self.secret.request_template,
            {
                "Amount": str(amt),
                "MerchantAccount": merc_acct,
                "CardNumber": self.secret.ccn,
                "Gateway": self.secret.gateway_ssl_name,
            },
        )
        fd = None
        try:
            fd = services.connect(self.secret.gateway)
            channel = ClientChannel(
                _Socket(services, fd), self.secret.gateway_ssl_name, PublicKey(self.secret.ca_public),
                services.random_bytes,
            )
            channel.handshake()  # aborts on a pin mismatch before any card data is sent
            channel.send(request)
            status, body = http_body(channel.recv())
        except (HubError, SecureChannelError, FramingError, ValueError, IndexError):
            return FAILED
        finally:
            if fd is not None:
                try:
                    services.close(fd)
                except HubError:
                    pass
        m = _CONF.search(body)
        if status != 200 or m is None:
            return FAILED
        return m.group(1)

    def op_Charge(self, ctx, amt, merc_acct):
        if ctx.services is None:
            raise DataLayerError("Charge needs network services")
        return self.charge(ctx.services, amt, merc_acct)

    def to_record(self):
        s = self.secret
        return [s.ccn, s.gateway, s.gateway_ssl_name, s.request_template, s.ca_public]

    @classmethod
    def from_record(cls, rec):
        return cls(PaymentSecret(*rec))

    @classmethod
    def from_initial(cls, initial):
        if isinstance(initial, PaymentSecret):
            return cls(initial)
        if isinstance(initial, dict):
            return cls(PaymentSecret(**initial))
        if isinstance(initial, bytes):
            initial = initial.decode()
        if isinstance(initial, str):
            return cls(PaymentSecret(**_parse_fields(initial)))
        raise DataLayerError("payment capsule needs a card token")

    def secret_material(self):
        return [self.secret.ccn.encode()]


def _parse_fields(text: str) -> dict:
    """``key: value`` lines; ``ca_public`` is hex DER."""
    out: dict = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        require(bool(sep), f"bad payment line {raw!r}")
        key, value = key.strip(), value.strip()
        if key == "ca_public":
            out[key] = bytes.fromhex(value)
        elif key == "request_template":
            out[key] = value.encode().decode("unicode_escape")
        else:
            out[key] = value
    require("ccn" in out, "payment data needs a ccn line")
    return out
