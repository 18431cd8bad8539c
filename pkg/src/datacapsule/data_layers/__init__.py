"""Reference data layers and the kind registry."""

from __future__ import annotations

from ..errors import DataLayerError
from .ads import AdsLayer
from .base import DataLayer, InvocationContext, OpSpec
from .dummy import DummyLayer
from .payment import PaymentLayer, PaymentSecret
from .provenance import ProvenanceLayer
from .stock import StockLayer, TradingStrategy

REGISTRY: dict[str, type[DataLayer]] = {
    cls.kind: cls for cls in (StockLayer, PaymentLayer, AdsLayer, ProvenanceLayer, DummyLayer)
}
KINDS = tuple(REGISTRY)


def layer_class(kind: str) -> type[DataLayer]:
    try:
        return REGISTRY[kind]
    except KeyError:
        raise DataLayerError(f"unknown data layer kind {kind!r}; expected one of {', '.join(KINDS)}") from None


def create_layer(kind: str, initial=None) -> DataLayer:
    return layer_class(kind).from_initial(initial)


def restore_layer(kind: str, record) -> DataLayer:
    return layer_class(kind).from_record(record)


__all__ = [
    "KINDS",
    "AdsLayer",
    "DataLayer",
    "DummyLayer",
    "InvocationContext",
    "OpSpec",
    "PaymentLayer",
    "PaymentSecret",
    "ProvenanceLayer",
    "StockLayer",
    "TradingStrategy",
    "create_layer",
    "layer_class",
    "restore_layer",
]
