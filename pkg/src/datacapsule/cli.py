"""Command-line entry points: ``capsule`` and ``bench``.

``capsule`` keeps its world in a home directory (``--home`` or
``$CAPSULE_HOME``): principals' signing keys, a certification authority,
the simulated payment gateway, and one state directory per machine.  Each
run reloads the machines from sealed storage.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from fractions import Fraction
from pathlib import Path

from .base_layer import HostingRequest, Identity, Machine, Response, host_transfer
from .crypto import KeyPair, sha256
from .data_layers.payment import PaymentLayer
from .errors import CapsuleError
from .host_hub import DEFAULT_ADDRESS, Faults, HostHub, PaymentGateway, SimNetwork, TimeAuthority
from .policy import parse_policy
from .trust_module import CertificationAuthority
from .deploy_sim import (
    CSV_HEADER,
    MODES,
    ScenarioConfig,
    run_aggregation_bench,
    run_invocation_bench,
    run_payload_sweep,
    run_stock_burst,
)


def _short(capsule_id: bytes) -> str:
    return sha256(capsule_id)[:8].hex()


class Home:
    def __init__(self, root: Path, faults: Faults | None = None):
        self.root = root
        (root / "identities").mkdir(parents=True, exist_ok=True)
        (root / "machines").mkdir(exist_ok=True)
        self.ca = CertificationAuthority("CA", self._key("ca"))
        self.network = SimNetwork()
        self.gateway = PaymentGateway(key=self._key("gateway"))
        self.gateway.install_certificate(self.ca.key)
        self._load_gateway()
        self.network.register(DEFAULT_ADDRESS, self.gateway)
        self.hub = HostHub(self.network, TimeAuthority(self._key("time")), faults)
        self.machines: dict[str, Machine] = {}

    def _key(self, name: str) -> KeyPair:
        path = self.root / f"{name}.pem"
        if path.exists():
            return KeyPair.from_pem(path.read_bytes())
        key = KeyPair.generate("ed25519")
        path.write_bytes(key.private_pem())
        return key

    def identity(self, name: str, create: bool = True) -> Identity:
        path = self.root / "identities" / f"{name}.pem"
        if path.exists():
            return Identity(name, KeyPair.from_pem(path.read_bytes()))
        if not create:
            raise SystemExit(f"no identity {name!r} in {self.root}")
        ident = Identity.generate(name)
        path.write_bytes(ident.key.private_pem())
        return ident

    # -- gateway ledger ------------------------------------------------------

    def _ledger_path(self) -> Path:
        return self.root / "gateway.json"

    def _load_gateway(self) -> None:
        path = self._ledger_path()
        if not path.exists():
            return
        data = json.loads(path.read_text())
        self.gateway.merchants = set(data.get("merchants", []))
        for card, acct in data.get("accounts", {}).items():
            a = self.gateway.open_account(card, acct["balance"])
            a.log = [tuple(e) for e in acct["log"]]
            self.gateway._issued.update(e[2] for e in a.log)
        self.gateway._serial = data.get("serial", 0)

    def save_gateway(self) -> None:
        data = {
            "merchants": sorted(self.gateway.merchants),
            "serial": self.gateway._serial,
            "accounts": {c: {"balance": a.balance, "log": [list(e) for e in a.log]} for c, a in self.gateway.accounts.items()},
        }
        self._ledger_path().write_text(json.dumps(data, indent=1))

    # -- machines ----------------------------------------------------------------

    def machine(self, name: str) -> Machine:
        if name not in self.machines:
            m = Machine(name, self.ca, hub=self.hub, state_dir=self.root / "machines" / name)
            m.reboot()
            self.machines[name] = m
        return self.machines[name]

    def find(self, handle: str):
        for d in sorted((self.root / "machines").iterdir()):
            m = self.machine(d.name)
            for cid, c in m.capsules.items():
                if _short(cid).startswith(handle) or cid.hex() == handle:
                    return m, c
        raise SystemExit(f"no capsule {handle!r}")

    def sign_file(self, path: str | None):
        if not path:
            return ()
        db = parse_policy(Path(path).read_text())
        return tuple(self.identity(a.issuer, create=False).sign(a) for a in db)


def _read(path: str | None):
    return Path(path).read_text() if path else None


def _cmd_create(home: Home, a) -> None:
    owner = home.identity(a.owner)
    known = {n: home.identity(n).public for n in a.known}
    data = _read(a.data)
    if a.kind == "payment" and data is not None:
        secret = PaymentLayer.from_initial(data).secret
        if not secret.ca_public:
            secret = dataclasses.replace(secret, ca_public=home.ca.public.der)
        data = secret
    m = home.machine(a.machine)
    c = m.create_capsule(owner, _read(a.policy) or "", a.kind, data, known, service=a.service)
    print(f"created {_short(c.id)} {c!r}")


def _cmd_invoke(home: Home, a) -> None:
    m, c = home.find(a.capsule)
    who = home.identity(a.invoker, create=False)
    args = [json.loads(x) for x in a.arg]
    r = Response.from_frame(m.invoke(c.id, who.request(c.id, a.op, args, home.sign_file(a.supporting))))
    home.save_gateway()
    print(json.dumps({"status": r.status, "result": _jsonable(r.result), "reason": r.reason, "kind": r.kind}))


def _cmd_host(home: Home, a) -> None:
    src_machine, c = home.find(a.capsule)
    dst = home.machine(a.target)
    share = Fraction(a.share) if a.share is not None else None
    req = HostingRequest(a.target, a.service or a.target, home.sign_file(a.supporting), share)
    new = host_transfer(c, req, dst)
    print(f"hosted {_short(new.id)} {new!r} lineage {new.lineage}")


def _cmd_log(home: Home, a) -> None:
    m, c = home.find(a.capsule)
    owner = home.identity(c.owner.name, create=False)
    op = "ReadLog" if a.writes else "AuditLog"
    r = Response.from_frame(m.invoke(c.id, owner.request(c.id, op)))
    for entry in r.unwrap():
        print(json.dumps(_jsonable(entry)))


def _cmd_gateway(home: Home, a) -> None:
    if a.merchant:
        home.gateway.merchants.update(a.merchant)
    if a.account:
        home.gateway.open_account(a.account, a.balance)
    home.save_gateway()
    for card, acct in home.gateway.accounts.items():
        print(f"{card[-4:]:>8} balance {acct.balance} charges {len(acct.log)}")


def _jsonable(v):
    if isinstance(v, bytes):
        return v.hex()
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def capsule_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="capsule", description="Create, host, invoke and audit data capsules.")
    p.add_argument("--home", default=os.environ.get("CAPSULE_HOME", ".capsule"))
    p.add_argument("--hub-fault", help="drop:P,corrupt:P,duplicate:P,reorder:P,delay:MS")
    sub = p.add_subparsers(dest="cmd", required=True)

    c = sub.add_parser("create")
    c.add_argument("--owner", required=True)
    c.add_argument("--policy")
    c.add_argument("--kind", default="dummy")
    c.add_argument("--data")
    c.add_argument("--machine", default="local")
    c.add_argument("--service")
    c.add_argument("--known", nargs="*", default=[], help="principals whose keys travel with the capsule")

    i = sub.add_parser("invoke")
    i.add_argument("capsule")
    i.add_argument("--as", dest="invoker", required=True)
    i.add_argument("--op", required=True)
    i.add_argument("--arg", action="append", default=[], help="JSON value; repeat per argument")
    i.add_argument("--supporting", help="policy file of assertions signed by their issuers")

    h = sub.add_parser("host")
    h.add_argument("capsule")
    h.add_argument("--target", required=True)
    h.add_argument("--service")
    h.add_argument("--supporting")
    h.add_argument("--share", help="fraction of each budget to transfer, e.g. 1/4")

    lg = sub.add_parser("log")
    lg.add_argument("capsule")
    lg.add_argument("--writes", action="store_true", help="provenance write log instead of the audit log")

    g = sub.add_parser("gateway")
    g.add_argument("--account")
    g.add_argument("--balance", type=int, default=0)
    g.add_argument("--merchant", action="append")

    a = p.parse_args(argv)
    home = Home(Path(a.home), Faults.parse(a.hub_fault) if a.hub_fault else None)
    try:
        {"create": _cmd_create, "invoke": _cmd_invoke, "host": _cmd_host, "log": _cmd_log, "gateway": _cmd_gateway}[a.cmd](
            home, a
        )
    except (CapsuleError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


# -- bench ---------------------------------------------------------------------------


def bench_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="bench", description="Deployment benchmarks in simulated time.")
    p.add_argument("what", choices=["invoke", "sweep", "stock", "aggregate"])
    p.add_argument("--mode", choices=MODES, action="append", help="repeatable; default all three")
    p.add_argument("--rtt-ms", type=float, default=10.0)
    p.add_argument("--payload", type=int, default=1024)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the CSV rows here")
    p.add_argument("--events", type=int, nargs="*", default=[100, 500, 1000])
    p.add_argument("--users", type=int, nargs="*", default=[2, 5, 10, 25])
    p.add_argument("--per-invocation", action="store_true", help="stock burst: new connection per event")
    p.add_argument("--compute", choices=["model", "measured"], default="model")
    p.add_argument("--boundary-us", type=float, default=800.0)
    a = p.parse_args(argv)

    rows = [CSV_HEADER]
    for mode in a.mode or MODES:
        cfg = ScenarioConfig(
            mode,
            rtt_ms=a.rtt_ms,
            payload_req=a.payload,
            payload_resp=a.payload,
            repetitions=a.reps,
            seed=a.seed,
            compute=a.compute,
            boundary_overhead_us=a.boundary_us,
            keepalive=False if a.per_invocation else None,
        )
        if a.what == "invoke":
            results = [run_invocation_bench(cfg)]
        elif a.what == "sweep":
            results = run_payload_sweep(cfg)
        elif a.what == "stock":
            results = [run_stock_burst(cfg, n) for n in a.events]
        else:
            for n in a.users:
                r = run_aggregation_bench(n, mode, rtt_ms=a.rtt_ms, seed=a.seed)
                print(f"{mode:<10} {n:>4} users  {r.kilobytes:10.1f} KB  pulls {r.pulls} pushes {r.pushes} releases {r.releases}")
                kb = f"{r.kilobytes:.1f}"
                rows.append(",".join(["aggregation_kb", mode, str(n)] + [kb] * 5))
            continue
        for m in results:
            print(m.describe())
            rows.append(m.row("latency_us"))
            rows.append(m.bandwidth_row())
    print()
    print("\n".join(rows))
    if a.out:
        Path(a.out).write_text("\n".join(rows) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(capsule_main())
