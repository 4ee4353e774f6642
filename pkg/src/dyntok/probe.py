"""Attention instrumentation: MAC counting and optional weight capture.

Usage::

    with AttentionProbe(keep_weights=True) as probe:
        forward(...)
    probe.macs, probe.events

Probes nest; every active probe sees every event.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field

import numpy as np

_ACTIVE: contextvars.ContextVar[tuple] = contextvars.ContextVar("dyntok_probes", default=())


@dataclass
class AttentionEvent:
    name: str
    queries: int
    keys: int
    dim: int
    heads: int
    weights: np.ndarray | None = None  # heads x queries x keys

    @property
    def macs(self) -> int:
        # QK^T and (weights @ V), each queries*keys*dim multiply-accumulates
        return 2 * self.queries * self.keys * self.dim


@dataclass
class AttentionProbe:
    keep_weights: bool = False
    events: list = field(default_factory=list)
    _token: object = field(default=None, repr=False)

    @property
    def macs(self) -> int:
        return sum(e.macs for e in self.events)

    def __enter__(self):
        self._token = _ACTIVE.set(_ACTIVE.get() + (self,))
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        return False


def wants_weights() -> bool:
    return any(p.keep_weights for p in _ACTIVE.get())


def record(name, queries, keys, dim, heads, weights=None):
    for probe in _ACTIVE.get():
        kept = weights if probe.keep_weights else None
        probe.events.append(AttentionEvent(name, queries, keys, dim, heads, kept))
